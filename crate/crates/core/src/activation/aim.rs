use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::CalibrationStats;
use crate::error::{Error, Result};
use crate::tensor_store::{Tensor, TensorMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AimParams {
    /// Balance factor in `[0, 1]`; 1 disables protection.
    pub omega: f64,
}

impl AimParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::validation(
                "params.omega",
                format!("balance factor {} must lie in [0, 1]", self.omega),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AimOutcome {
    pub merged: TensorMap,
    /// Tensors that received row protection; everything else passed through.
    pub covered: BTreeSet<String>,
}

fn protect(name: &str, base: &Tensor, merged: &Tensor, importance: &[f64], omega: f64) -> Result<Tensor> {
    let (rows, cols) = base.matrix_dims().expect("caller checks 2-D");
    if importance.len() != rows {
        return Err(Error::Stats(format!(
            "activation.{name}: {} row scores for a tensor with {rows} rows",
            importance.len()
        )));
    }
    let max = importance.iter().fold(0.0f64, |m, &a| m.max(a));
    let mut out = Vec::with_capacity(rows * cols);
    for (i, &a) in importance.iter().enumerate() {
        let norm = if max > 0.0 { a / max } else { 0.0 };
        let keep = 1.0 - (1.0 - omega) * norm;
        let b = &base.data()[i * cols..(i + 1) * cols];
        let m = &merged.data()[i * cols..(i + 1) * cols];
        if keep == 1.0 {
            out.extend_from_slice(m);
        } else if keep == 0.0 {
            out.extend_from_slice(b);
        } else {
            out.extend(
                b.iter()
                    .zip(m)
                    .map(|(&b, &m)| (b as f64 + keep * (m as f64 - b as f64)) as f32),
            );
        }
    }
    Ok(merged.like(out))
}

/// Pull each row of `merged` back toward `base` in proportion to its
/// normalized activation importance `â_i = a_i / max_j a_j`: the row keeps a
/// fraction `1 − (1 − ω) â_i` of its change. Tensors without statistics (and
/// non-matrix tensors) pass through unchanged.
pub fn aim_adjust(
    base: &TensorMap,
    merged: &TensorMap,
    stats: &CalibrationStats,
    params: &AimParams,
) -> Result<AimOutcome> {
    params.validate()?;
    stats.validate()?;
    base.check_same_manifest(merged, "merged model")?;
    let out = merged.try_par_map(|name, m| {
        let b = base.get(name).unwrap();
        match stats.activation.get(name) {
            Some(imp) if m.is_matrix() => protect(name, b, m, imp, params.omega),
            _ => Ok(m.clone()),
        }
    })?;
    let covered = merged
        .iter()
        .filter(|(n, t)| t.is_matrix() && stats.activation.contains_key(*n))
        .map(|(n, _)| n.clone())
        .collect();
    Ok(AimOutcome {
        merged: out,
        covered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(importance: Vec<f64>) -> (TensorMap, TensorMap, CalibrationStats) {
        let mut base = TensorMap::new();
        base.insert("w", Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]));
        base.insert("b", Tensor::new(vec![2], vec![0.0, 0.0]));
        let mut merged = TensorMap::new();
        merged.insert("w", Tensor::new(vec![2, 2], vec![1.0, -1.0, 3.0, 2.0]));
        merged.insert("b", Tensor::new(vec![2], vec![5.0, 5.0]));
        let stats = CalibrationStats {
            schema_version: 1,
            activation: [("w".to_string(), importance)].into(),
            ..Default::default()
        };
        (base, merged, stats)
    }

    #[test]
    fn omega_one_returns_merged() {
        let (base, merged, stats) = setup(vec![1.0, 0.3]);
        let out = aim_adjust(&base, &merged, &stats, &AimParams { omega: 1.0 }).unwrap();
        assert_eq!(out.merged, merged);
    }

    #[test]
    fn omega_zero_fully_protects_top_row() {
        let (base, merged, stats) = setup(vec![1.0, 0.5]);
        let out = aim_adjust(&base, &merged, &stats, &AimParams { omega: 0.0 }).unwrap();
        let w = out.merged.get("w").unwrap().data();
        assert_eq!(&w[..2], &[0.0, 0.0]);
        assert_eq!(&w[2..], &[2.0, 1.5]);
        assert_eq!(out.merged.get("b").unwrap().data(), &[5.0, 5.0]);
        assert_eq!(out.covered, BTreeSet::from(["w".to_string()]));
    }

    #[test]
    fn all_zero_importance_means_no_protection() {
        let (base, merged, stats) = setup(vec![0.0, 0.0]);
        let out = aim_adjust(&base, &merged, &stats, &AimParams { omega: 0.0 }).unwrap();
        assert_eq!(out.merged, merged);
    }

    #[test]
    fn length_mismatch_and_bad_omega() {
        let (base, merged, stats) = setup(vec![1.0, 0.5, 0.2]);
        assert!(matches!(
            aim_adjust(&base, &merged, &stats, &AimParams { omega: 0.4 }),
            Err(Error::Stats(_))
        ));
        assert!(AimParams { omega: 1.2 }.validate().is_err());
    }
}
