//! Task vectors `δ_k = θ_k − θ_0` and their linear recombination
//! `θ_M = θ_0 + Σ_k λ_k δ_k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use glob::Pattern;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{Tensor, TensorMap};

/// Layer a tensor belongs to, for layer-wise coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    Index(u32),
    /// Tensors outside any numbered block (embeddings, final norm, head).
    Global,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Index(i) => write!(f, "{i}"),
            LayerId::Global => f.write_str("global"),
        }
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global" {
            return Ok(LayerId::Global);
        }
        s.parse()
            .map(LayerId::Index)
            .map_err(|_| format!("layer id must be an integer or \"global\", got `{s}`"))
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps tensor names to layers. By default the first dot-separated segment
/// that parses as an integer is the layer index; with a custom regex, capture
/// group 1 is parsed instead. Names that do not match are [`LayerId::Global`].
#[derive(Clone, Debug, Default)]
pub struct LayerAssigner {
    pattern: Option<Regex>,
}

impl LayerAssigner {
    pub fn with_pattern(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::validation("layer_pattern", e.to_string()))?;
        if re.captures_len() < 2 {
            return Err(Error::validation(
                "layer_pattern",
                "pattern needs a capture group for the layer index",
            ));
        }
        Ok(Self { pattern: Some(re) })
    }

    pub fn pattern(&self) -> Option<&str> {
        self.pattern.as_ref().map(Regex::as_str)
    }

    pub fn assign(&self, name: &str) -> LayerId {
        match &self.pattern {
            Some(re) => re
                .captures(name)
                .and_then(|c| c.get(1))
                .and_then(|m| m.as_str().parse().ok())
                .map_or(LayerId::Global, LayerId::Index),
            None => name
                .split('.')
                .find_map(|seg| seg.parse().ok())
                .map_or(LayerId::Global, LayerId::Index),
        }
    }

    pub fn layers<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> BTreeSet<LayerId> {
        names.into_iter().map(|n| self.assign(n)).collect()
    }
}

/// Glob patterns naming tensors that are excluded from delta arithmetic and
/// copied from the base model unchanged.
#[derive(Clone, Debug, Default)]
pub struct SkipList {
    patterns: Vec<Pattern>,
}

impl SkipList {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let patterns = patterns
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Pattern::new(p.as_ref())
                    .map_err(|e| Error::validation(format!("skip[{i}]"), e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { patterns })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(name))
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub model_id: String,
    /// Manifest fingerprint of the base the deltas were taken against.
    pub base_fingerprint: String,
    pub deltas: BTreeMap<String, Tensor>,
    /// Base tensors excluded from delta arithmetic.
    pub skipped: BTreeSet<String>,
}

impl TaskVector {
    /// Same identity and skip set, new deltas.
    pub fn with_deltas(&self, deltas: BTreeMap<String, Tensor>) -> Self {
        Self {
            model_id: self.model_id.clone(),
            base_fingerprint: self.base_fingerprint.clone(),
            deltas,
            skipped: self.skipped.clone(),
        }
    }

    /// Transform every delta in parallel.
    pub fn try_map_deltas<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&str, &Tensor) -> Result<Tensor> + Sync,
    {
        let entries: Vec<_> = self.deltas.iter().collect();
        let deltas = entries
            .into_par_iter()
            .map(|(n, t)| f(n, t).map(|r| (n.clone(), r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.with_deltas(deltas.into_iter().collect()))
    }
}

/// `δ = model − base`, elementwise in FP32.
///
/// Names present on only one side are an error unless `skip` matches them.
/// `base + δ` reproduces `model` bit-for-bit whenever the subtraction is exact,
/// which holds for same-sign pairs within a factor of two of each other.
pub fn compute_task_vector(
    model_id: &str,
    model: &TensorMap,
    base: &TensorMap,
    skip: &SkipList,
) -> Result<TaskVector> {
    if let Some(extra) = model.names().find(|n| !base.contains(n) && !skip.matches(n)) {
        return Err(Error::MissingTensor {
            tensor: extra.clone(),
            side: "base model".into(),
        });
    }
    let mut skipped = BTreeSet::new();
    let mut work = Vec::new();
    for (name, b) in base.iter() {
        if skip.matches(name) {
            skipped.insert(name.clone());
            continue;
        }
        let m = model.get(name).ok_or_else(|| Error::MissingTensor {
            tensor: name.clone(),
            side: format!("model `{model_id}`"),
        })?;
        if m.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                tensor: name.clone(),
                left: m.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        work.push((name, m, b));
    }
    let deltas: BTreeMap<String, Tensor> = work
        .into_par_iter()
        .map(|(name, m, b)| {
            let d = m.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            (name.clone(), Tensor::new(b.shape().to_vec(), d))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    Ok(TaskVector {
        model_id: model_id.to_string(),
        base_fingerprint: base.manifest_fingerprint(),
        deltas,
        skipped,
    })
}

/// Coefficient override for tensors matching a glob, optionally restricted to one model.
#[derive(Clone, Debug)]
pub struct CoefficientOverride {
    pub pattern: Pattern,
    pub model_id: Option<String>,
    pub value: f64,
}

/// Merge coefficients `λ`. Lookup order for a (model, tensor) pair: a matching
/// override, then the model's per-layer value, then the model-wide value.
#[derive(Clone, Debug, Default)]
pub struct Coefficients {
    per_model: BTreeMap<String, f64>,
    per_layer: BTreeMap<String, BTreeMap<LayerId, f64>>,
    overrides: Vec<CoefficientOverride>,
    layers: LayerAssigner,
}

impl Coefficients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uniform<S: AsRef<str>>(model_ids: &[S], lambda: f64) -> Self {
        let mut c = Self::new();
        for id in model_ids {
            c.set_model(id.as_ref(), lambda);
        }
        c
    }

    pub fn set_model(&mut self, model_id: &str, lambda: f64) -> &mut Self {
        self.per_model.insert(model_id.to_string(), lambda);
        self
    }

    pub fn set_layer(&mut self, model_id: &str, layer: LayerId, lambda: f64) -> &mut Self {
        self.per_layer
            .entry(model_id.to_string())
            .or_default()
            .insert(layer, lambda);
        self
    }

    pub fn push_override(&mut self, o: CoefficientOverride) -> &mut Self {
        self.overrides.push(o);
        self
    }

    pub fn set_layer_assigner(&mut self, layers: LayerAssigner) -> &mut Self {
        self.layers = layers;
        self
    }

    pub fn layer_assigner(&self) -> &LayerAssigner {
        &self.layers
    }

    pub fn per_layer(&self) -> &BTreeMap<String, BTreeMap<LayerId, f64>> {
        &self.per_layer
    }

    pub fn per_model(&self) -> &BTreeMap<String, f64> {
        &self.per_model
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .per_model
            .values()
            .chain(self.per_layer.values().flat_map(|m| m.values()))
            .chain(self.overrides.iter().map(|o| &o.value));
        for v in all {
            if !v.is_finite() {
                return Err(Error::validation("coefficients", format!("non-finite value {v}")));
            }
        }
        Ok(())
    }

    pub fn lambda(&self, model_id: &str, tensor: &str) -> Result<f64> {
        for o in &self.overrides {
            if o.model_id.as_deref().is_none_or(|m| m == model_id) && o.pattern.matches(tensor) {
                return Ok(o.value);
            }
        }
        if let Some(layers) = self.per_layer.get(model_id) {
            if let Some(v) = layers.get(&self.layers.assign(tensor)) {
                return Ok(*v);
            }
        }
        self.per_model
            .get(model_id)
            .copied()
            .ok_or_else(|| Error::MissingCoefficient {
                model_id: model_id.to_string(),
                tensor: tensor.to_string(),
            })
    }
}

/// Check that every vector was taken against `base`, that model ids are
/// unique and skip sets agree; returns the vectors sorted by model id, which
/// is the fixed reduction order used by every merger.
pub fn sorted_vectors<'a>(base: &TensorMap, vectors: &'a [TaskVector]) -> Result<Vec<&'a TaskVector>> {
    let fp = base.manifest_fingerprint();
    let mut sorted: Vec<&TaskVector> = vectors.iter().collect();
    sorted.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    for pair in sorted.windows(2) {
        if pair[0].model_id == pair[1].model_id {
            return Err(Error::validation(
                "experts",
                format!("duplicate model id `{}`", pair[0].model_id),
            ));
        }
    }
    for v in &sorted {
        if v.base_fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                model_id: v.model_id.clone(),
            });
        }
        if v.skipped != sorted[0].skipped {
            return Err(Error::validation(
                "skip",
                format!("task vector `{}` skips a different tensor set", v.model_id),
            ));
        }
        for name in base.names() {
            if !v.skipped.contains(name) && !v.deltas.contains_key(name) {
                return Err(Error::MissingTensor {
                    tensor: name.clone(),
                    side: format!("task vector `{}`", v.model_id),
                });
            }
        }
    }
    Ok(sorted)
}

/// `θ_M = θ_0 + Σ_k λ_k δ_k`, accumulated in FP64 in sorted model-id order
/// and rounded once to FP32. Skipped tensors are copied from `base`.
pub fn apply_task_vectors(
    base: &TensorMap,
    vectors: &[TaskVector],
    coeffs: &Coefficients,
) -> Result<TensorMap> {
    coeffs.validate()?;
    let sorted = sorted_vectors(base, vectors)?;
    base.try_par_map(|name, b| {
        if sorted.first().is_none_or(|v| v.skipped.contains(name)) {
            return Ok(b.clone());
        }
        let mut acc: Vec<f64> = b.data().iter().map(|&x| x as f64).collect();
        for v in &sorted {
            let lambda = coeffs.lambda(&v.model_id, name)?;
            let d = &v.deltas[name];
            for (a, &x) in acc.iter_mut().zip(d.data()) {
                *a += lambda * x as f64;
            }
        }
        Ok(b.like(acc.into_iter().map(|x| x as f32).collect()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, shape: Vec<usize>, data: Vec<f32>) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(name, Tensor::new(shape, data));
        m
    }

    #[test]
    fn self_difference_is_zero() {
        let m = one("w", vec![3], vec![1.0, -2.0, 3.5]);
        let tv = compute_task_vector("m", &m, &m, &SkipList::default()).unwrap();
        assert_eq!(tv.deltas["w"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn delta_arithmetic() {
        let model = one("w", vec![2], vec![3.0, 5.0]);
        let base = one("w", vec![2], vec![1.0, 2.0]);
        let tv = compute_task_vector("m", &model, &base, &SkipList::default()).unwrap();
        assert_eq!(tv.deltas["w"].data(), &[2.0, 3.0]);
    }

    #[test]
    fn mismatches_are_errors() {
        let base = one("w", vec![2], vec![1.0, 2.0]);
        let wrong_shape = one("w", vec![1, 2], vec![1.0, 2.0]);
        assert!(matches!(
            compute_task_vector("m", &wrong_shape, &base, &SkipList::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        let other_name = one("v", vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            compute_task_vector("m", &other_name, &base, &SkipList::default()),
            Err(Error::MissingTensor { .. })
        ));
    }

    #[test]
    fn skipped_names_are_tolerated_and_copied() {
        let mut base = one("w", vec![2], vec![1.0, 2.0]);
        base.insert("rotary.inv_freq", Tensor::new(vec![1], vec![9.0]));
        let mut model = one("w", vec![2], vec![2.0, 2.0]);
        model.insert("extra.buffer", Tensor::new(vec![1], vec![1.0]));
        let skip = SkipList::new(&["rotary.*", "extra.*"]).unwrap();
        let tv = compute_task_vector("m", &model, &base, &skip).unwrap();
        assert!(tv.skipped.contains("rotary.inv_freq"));
        let out = apply_task_vectors(&base, &[tv], &Coefficients::uniform(&["m"], 2.0)).unwrap();
        assert_eq!(out.get("rotary.inv_freq").unwrap().data(), &[9.0]);
        assert_eq!(out.get("w").unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn zero_coefficient_returns_base() {
        let base = one("w", vec![3], vec![0.1, -7.25, 3.0e-12]);
        let model = one("w", vec![3], vec![5.0, 1.0, -2.0]);
        let tv = compute_task_vector("m", &model, &base, &SkipList::default()).unwrap();
        let out = apply_task_vectors(&base, &[tv], &Coefficients::uniform(&["m"], 0.0)).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn linear_combination_example() {
        let base = one("w", vec![2], vec![1.0, 2.0]);
        let fp = base.manifest_fingerprint();
        let tv = |id: &str, d: Vec<f32>| TaskVector {
            model_id: id.into(),
            base_fingerprint: fp.clone(),
            deltas: [("w".to_string(), Tensor::new(vec![2], d))].into(),
            skipped: BTreeSet::new(),
        };
        let vs = [tv("a", vec![2.0, 0.0]), tv("b", vec![0.0, 4.0])];
        let out = apply_task_vectors(&base, &vs, &Coefficients::uniform(&["a", "b"], 0.5)).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fingerprint_and_coefficient_errors() {
        let base = one("w", vec![2], vec![1.0, 2.0]);
        let other = one("w", vec![1, 2], vec![1.0, 2.0]);
        let tv = compute_task_vector("m", &base, &base, &SkipList::default()).unwrap();
        assert!(matches!(
            apply_task_vectors(&other, &[tv.clone()], &Coefficients::uniform(&["m"], 1.0)),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(matches!(
            apply_task_vectors(&base, &[tv.clone()], &Coefficients::uniform(&["x"], 1.0)),
            Err(Error::MissingCoefficient { .. })
        ));
        assert!(matches!(
            apply_task_vectors(&base, &[tv], &Coefficients::uniform(&["m"], f64::NAN)),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn layer_assignment() {
        let la = LayerAssigner::default();
        assert_eq!(la.assign("model.layers.12.mlp.up_proj.weight"), LayerId::Index(12));
        assert_eq!(la.assign("model.embed_tokens.weight"), LayerId::Global);
        assert_eq!(la.assign("lm_head.weight"), LayerId::Global);
        let custom = LayerAssigner::with_pattern(r"blocks_(\d+)").unwrap();
        assert_eq!(custom.assign("enc.blocks_3.w"), LayerId::Index(3));
        assert_eq!(custom.assign("enc.layers.3.w"), LayerId::Global);
        assert!(LayerAssigner::with_pattern(r"\d+").is_err());
    }

    #[test]
    fn coefficient_lookup_order() {
        let mut c = Coefficients::uniform(&["r1"], 0.7);
        c.set_layer("r1", LayerId::Index(0), 0.9);
        c.push_override(CoefficientOverride {
            pattern: Pattern::new("model.embed_tokens.*").unwrap(),
            model_id: None,
            value: 0.2,
        });
        assert_eq!(c.lambda("r1", "model.layers.0.w").unwrap(), 0.9);
        assert_eq!(c.lambda("r1", "model.layers.1.w").unwrap(), 0.7);
        assert_eq!(c.lambda("r1", "model.embed_tokens.weight").unwrap(), 0.2);
    }

    #[test]
    fn layer_id_text_roundtrip() {
        for s in ["0", "17", "global"] {
            assert_eq!(s.parse::<LayerId>().unwrap().to_string(), s);
        }
        assert!("x".parse::<LayerId>().is_err());
    }
}
