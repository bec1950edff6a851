use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Scale;
use crate::error::{Error, Result};
use crate::tensor_store::{load_checkpoint, read_manifest, TensorMap};

/// Mean shift above which a tensor counts as substantially changed.
pub const SHIFT_THRESHOLD: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub name: String,
    pub numel: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Element count with `lower <= |a − b| < upper`. The first bin holds exact
/// zeros and the second everything else below `1e-8`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub tensors: Vec<TensorDiff>,
    /// Largest mean shifts first.
    pub top: Vec<TensorDiff>,
    pub histogram: Vec<HistogramBin>,
    pub global_mean_abs: f64,
    pub global_max_abs: f64,
    pub shift_threshold: f64,
    pub tensors_above_threshold: usize,
}

const DECADES: std::ops::RangeInclusive<i32> = -8..=0;

fn bin_edges() -> Vec<(f64, f64)> {
    let mut edges = vec![(0.0, 0.0), (0.0, 1e-8)];
    for e in DECADES {
        edges.push((10f64.powi(e), 10f64.powi(e + 1)));
    }
    edges.push((10.0, f64::INFINITY));
    edges
}

fn bin_of(d: f64) -> usize {
    if d == 0.0 {
        return 0;
    }
    if d < 1e-8 {
        return 1;
    }
    let e = d.log10().floor() as i32;
    (e.clamp(*DECADES.start(), *DECADES.end() + 1) - DECADES.start()) as usize + 2
}

/// Element-wise shift statistics between two checkpoints with the same
/// manifest, computed in FP64.
pub fn diff_checkpoints(a: &TensorMap, b: &TensorMap, top_n: usize) -> Result<DiffReport> {
    a.check_same_manifest(b, "the second checkpoint")?;
    let edges = bin_edges();
    let entries: Vec<_> = a.iter().collect();
    let per: Vec<(TensorDiff, f64, Vec<u64>)> = entries
        .into_par_iter()
        .map(|(name, ta)| {
            let tb = b.get(name).unwrap();
            let mut hist = vec![0u64; edges.len()];
            let (mut sum, mut max) = (0.0f64, 0.0f64);
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                let d = (x as f64 - y as f64).abs();
                sum += d;
                max = max.max(d);
                hist[bin_of(d)] += 1;
            }
            let n = ta.numel();
            let diff = TensorDiff {
                name: name.clone(),
                numel: n,
                mean_abs: if n == 0 { 0.0 } else { sum / n as f64 },
                max_abs: max,
            };
            (diff, sum, hist)
        })
        .collect();

    let mut histogram: Vec<HistogramBin> = edges
        .iter()
        .map(|&(lower, upper)| HistogramBin {
            lower,
            upper,
            count: 0,
        })
        .collect();
    let (mut total, mut count, mut gmax) = (0.0f64, 0usize, 0.0f64);
    let mut tensors = Vec::with_capacity(per.len());
    for (d, sum, hist) in per {
        for (bin, c) in histogram.iter_mut().zip(hist) {
            bin.count += c;
        }
        total += sum;
        count += d.numel;
        gmax = gmax.max(d.max_abs);
        tensors.push(d);
    }
    let mut top = tensors.clone();
    top.sort_by(|x, y| y.mean_abs.total_cmp(&x.mean_abs).then_with(|| x.name.cmp(&y.name)));
    top.truncate(top_n);
    let above = tensors.iter().filter(|t| t.mean_abs > SHIFT_THRESHOLD).count();
    Ok(DiffReport {
        tensors,
        top,
        histogram,
        global_mean_abs: if count == 0 { 0.0 } else { total / count as f64 },
        global_max_abs: gmax,
        shift_threshold: SHIFT_THRESHOLD,
        tensors_above_threshold: above,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub non_finite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub params: u64,
    pub detected_scale: Scale,
    pub tensors: Vec<TensorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<TensorSummary>,
}

/// List a checkpoint's tensors from its headers. With `tensor`, the
/// checkpoint is loaded and value statistics for that tensor are added.
pub fn inspect_checkpoint(path: impl AsRef<Path>, tensor: Option<&str>) -> Result<InspectReport> {
    let path = path.as_ref();
    let metas = read_manifest(path)?;
    let params: u64 = metas.iter().map(|m| m.numel() as u64).sum();
    let summary = match tensor {
        None => None,
        Some(name) => {
            let map = load_checkpoint(path)?;
            let t = map.get(name).ok_or_else(|| Error::MissingTensor {
                tensor: name.to_string(),
                side: path.display().to_string(),
            })?;
            let finite: Vec<f64> = t.data().iter().filter(|v| v.is_finite()).map(|&v| v as f64).collect();
            let n = finite.len().max(1) as f64;
            let mean = finite.iter().sum::<f64>() / n;
            let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Some(TensorSummary {
                name: name.to_string(),
                dtype: t.source_dtype().to_string(),
                shape: t.shape().to_vec(),
                min: finite.iter().copied().fold(f64::INFINITY, f64::min),
                max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean,
                std: var.sqrt(),
                mean_abs: finite.iter().map(|v| v.abs()).sum::<f64>() / n,
                non_finite: t.numel() - finite.len(),
            })
        }
    };
    Ok(InspectReport {
        params,
        detected_scale: Scale::from_param_count(params),
        tensors: metas
            .into_iter()
            .map(|m| TensorInfo {
                name: m.name,
                dtype: m.dtype.to_string(),
                shape: m.shape,
            })
            .collect(),
        summary,
    })
}
