//! Merge recipes: TOML job descriptions, defaults keyed on model scale,
//! orchestration of a merge run and its provenance manifest.
//!
//! A recipe names a base checkpoint, one or more expert checkpoints and a
//! method. Hyperparameters left out are filled from a built-in table keyed on
//! the model's size class, which is detected from the base checkpoint's
//! parameter count unless `scale` is given. Relative paths are resolved
//! against the recipe file's directory.
//!
//! ```toml
//! method = "ties"
//! base = "models/qwen-math-7b"
//! output = "merged/ties-7b"
//!
//! [[experts]]
//! id = "r1"
//! path = "models/r1-distill-7b"
//!
//! [params]
//! k = 0.8
//! alpha = 1.0
//! ```

mod defaults;
mod diff;
mod run;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use glob::Pattern;
use serde::{Deserialize, Serialize};

pub use defaults::{Scale, ScaleDefaults};
pub use diff::{diff_checkpoints, inspect_checkpoint, DiffReport, HistogramBin, InspectReport, TensorDiff, TensorInfo, TensorSummary};
pub use run::{run_merge, AimTrace, InputRecord, LoreTrace, MergeManifest, OutputRecord, MANIFEST_FILE};
pub use sweep::SweepSpec;

use crate::activation::{AimParams, SensParams};
use crate::error::{Error, Result};
use crate::lowrank::{LoreParams, RankSpec, TauSpec};
use crate::merge::{DareParams, TiesParams};
use crate::task_vectors::{CoefficientOverride, Coefficients, LayerAssigner, SkipList};
use crate::tensor_store::{read_manifest, DType, DtypePolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Average,
    TaskArithmetic,
    Ties,
    DareTa,
    DareTies,
    Twin,
    Lore,
    AimPost,
    Sens,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Ties => "ties",
            Method::DareTa => "dare_ta",
            Method::DareTies => "dare_ties",
            Method::Twin => "twin",
            Method::Lore => "lore",
            Method::AimPost => "aim_post",
            Method::Sens => "sens",
        }
    }

    fn needs_stats(self) -> bool {
        matches!(self, Method::AimPost | Method::Sens)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub id: String,
    pub path: PathBuf,
}

/// Coefficient override: tensors matching `pattern` (optionally only for one
/// expert) use `value` as their λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaOverride {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub value: f64,
}

/// Method hyperparameters. Which fields apply depends on the method; after
/// [`MergeRecipe::finalize`] every applicable field is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// TA coefficient, TIES scale or Sens mean coefficient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// TIES trim ratio (fraction zeroed, or kept with `trim_is_keep`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    /// DARE drop rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// AIM balance factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// Sens temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// LoRE threshold as a fraction of the largest singular value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// LoRE threshold as an absolute value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_abs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lore_lambda: Option<f64>,
    /// Twin fixed rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Twin energy fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    /// Method run before the AIM post-pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<Method>,
    /// Per-expert λ replacing `alpha`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lambda: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_overrides: Vec<LambdaOverride>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: Method,
    pub base: PathBuf,
    #[serde(default)]
    pub experts: Vec<ExpertSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<PathBuf>,
    /// Globs of tensors copied from the base unchanged.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skip: Vec<String>,
    /// Regex whose first capture group is the layer index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DtypePolicy>,
    /// Largest shard payload in bytes; unset writes a single file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_shard_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Scale>,
    /// Read `params.k` as the fraction of entries kept rather than trimmed.
    #[serde(default, skip_serializing_if = "is_false")]
    pub trim_is_keep: bool,
    #[serde(default)]
    pub params: Params,
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn missing(field: &str, method: Method, scale: Scale) -> Error {
    Error::validation(
        field,
        format!("required for method `{method}`; no default exists at {scale} scale"),
    )
}

/// Read and fully validate a recipe file.
pub fn parse_recipe(path: impl AsRef<Path>) -> Result<MergeRecipe> {
    MergeRecipe::load(path)?.finalize()
}

impl MergeRecipe {
    /// Parse TOML without filling defaults. Relative paths are resolved against `dir`.
    pub fn from_toml(text: &str, dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut recipe: MergeRecipe = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "recipe".to_string() } else { path };
            Error::validation(field, e.into_inner().message().trim().to_string())
        })?;
        recipe.resolve_paths(dir);
        Ok(recipe)
    }

    /// Read a recipe file without filling defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.base);
        self.experts.iter_mut().for_each(|e| fix(&mut e.path));
        if let Some(p) = self.output.as_mut() {
            fix(p);
        }
        if let Some(p) = self.stats.as_mut() {
            fix(p);
        }
    }

    /// Scale from the recipe, or detected from the base checkpoint's headers.
    pub fn detect_scale(&self) -> Result<Scale> {
        if let Some(s) = self.scale {
            return Ok(s);
        }
        let count: u64 = read_manifest(&self.base)?.iter().map(|m| m.numel() as u64).sum();
        Ok(Scale::from_param_count(count))
    }

    /// Validate and fill every default the method needs. The result is
    /// explicit: serializing and re-parsing it yields the same recipe.
    pub fn finalize(mut self) -> Result<Self> {
        self.check_experts()?;
        if self.method.needs_stats() && self.stats.is_none() {
            return Err(Error::validation(
                "stats",
                format!("method `{}` needs a calibration stats file", self.method),
            ));
        }
        if self.trim_is_keep {
            if let Some(keep) = self.params.k {
                if !(keep > 0.0 && keep <= 1.0) {
                    return Err(Error::validation(
                        "params.k",
                        format!("keep ratio {keep} must lie in (0, 1]"),
                    ));
                }
                self.params.k = Some(1.0 - keep);
            }
            self.trim_is_keep = false;
        }
        SkipList::new(&self.skip)?;
        self.layer_assigner()?;
        for (i, o) in self.params.lambda_overrides.iter().enumerate() {
            Pattern::new(&o.pattern).map_err(|e| {
                Error::validation(format!("params.lambda_overrides[{i}].pattern"), e.to_string())
            })?;
        }
        let ids: BTreeSet<&str> = self.experts.iter().map(|e| e.id.as_str()).collect();
        for id in self.params.lambda.keys() {
            if !ids.contains(id.as_str()) {
                return Err(Error::validation(
                    format!("params.lambda.{id}"),
                    "no expert with this id",
                ));
            }
        }
        if self.dtype.is_none() {
            self.dtype = Some(match self.method {
                Method::Sens => DtypePolicy::uniform(DType::F32),
                _ => DtypePolicy::preserve(),
            });
        }
        if self.max_shard_size == Some(0) {
            return Err(Error::validation("max_shard_size", "must be positive"));
        }

        // Scale detection reads the base headers, so it only runs when a default is needed.
        let mut cached = self.scale;
        let mut params = self.params.clone();
        {
            let this = &self;
            let mut scale = || -> Result<Scale> {
                if cached.is_none() {
                    cached = Some(this.detect_scale()?);
                }
                Ok(cached.unwrap())
            };
            fill(self.method, &mut params, &mut scale)?;
            if self.method == Method::AimPost {
                let inner = *params.inner.get_or_insert(Method::Ties);
                if inner == Method::AimPost {
                    return Err(Error::validation("params.inner", "cannot nest aim_post"));
                }
                fill(inner, &mut params, &mut scale)?;
            }
        }
        self.params = params;
        self.scale = cached;
        self.check_ranges()?;
        Ok(self)
    }

    fn check_experts(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::validation("experts", "at least one expert is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.experts.iter().enumerate() {
            if e.id.trim().is_empty() {
                return Err(Error::validation(format!("experts[{i}].id"), "must not be empty"));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation(
                    format!("experts[{i}].id"),
                    format!("duplicate id `{}`", e.id),
                ));
            }
        }
        Ok(())
    }

    fn check_ranges(&self) -> Result<()> {
        let methods = [Some(self.method), self.params.inner.filter(|_| self.method == Method::AimPost)];
        for m in methods.into_iter().flatten() {
            match m {
                Method::Ties => self.ties_params()?.validate()?,
                Method::DareTa => self.dare_params()?.validate()?,
                Method::DareTies => {
                    self.dare_params()?.validate()?;
                    self.ties_params()?.validate()?;
                }
                Method::Twin => self.rank_spec()?.validate()?,
                Method::Lore => self.lore_params()?.validate()?,
                Method::AimPost => self.aim_params()?.validate()?,
                Method::Sens => self.sens_params()?.validate()?,
                Method::Average | Method::TaskArithmetic => {}
            }
        }
        if let Some(a) = self.params.alpha {
            if !a.is_finite() {
                return Err(Error::validation("params.alpha", "must be finite"));
            }
        }
        for (id, v) in &self.params.lambda {
            if !v.is_finite() {
                return Err(Error::validation(format!("params.lambda.{id}"), "must be finite"));
            }
        }
        if let Some(p) = self.params.p {
            if p >= 0.5 && p < 1.0 {
                log::warn!("DARE drop rate {p} is at or above 0.5, which tends to hurt merged quality");
            }
        }
        Ok(())
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::validation("output", "no output path in the recipe or on the command line"))
    }

    pub fn expert_ids(&self) -> Vec<&str> {
        self.experts.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn skip_list(&self) -> Result<SkipList> {
        SkipList::new(&self.skip)
    }

    pub fn layer_assigner(&self) -> Result<LayerAssigner> {
        match &self.layer_pattern {
            Some(p) => LayerAssigner::with_pattern(p),
            None => Ok(LayerAssigner::default()),
        }
    }

    pub fn dtype_policy(&self) -> DtypePolicy {
        self.dtype.clone().unwrap_or_else(DtypePolicy::preserve)
    }

    fn need<T: Copy>(&self, v: Option<T>, field: &str) -> Result<T> {
        v.ok_or_else(|| Error::validation(field, format!("required for method `{}`", self.method)))
    }

    /// λ for task-arithmetic-style methods: `alpha` for every expert, then
    /// per-expert values, then glob overrides.
    pub fn coefficients(&self) -> Result<Coefficients> {
        let alpha = self.need(self.params.alpha, "params.alpha")?;
        let mut c = Coefficients::uniform(&self.expert_ids(), alpha);
        for (id, v) in &self.params.lambda {
            c.set_model(id, *v);
        }
        for (i, o) in self.params.lambda_overrides.iter().enumerate() {
            let pattern = Pattern::new(&o.pattern).map_err(|e| {
                Error::validation(format!("params.lambda_overrides[{i}].pattern"), e.to_string())
            })?;
            c.push_override(CoefficientOverride {
                pattern,
                model_id: o.model.clone(),
                value: o.value,
            });
        }
        c.set_layer_assigner(self.layer_assigner()?);
        Ok(c)
    }

    pub fn ties_params(&self) -> Result<TiesParams> {
        Ok(TiesParams {
            trim_ratio: self.need(self.params.k, "params.k")?,
            alpha: self.need(self.params.alpha, "params.alpha")?,
        })
    }

    pub fn dare_params(&self) -> Result<DareParams> {
        Ok(DareParams {
            drop_rate: self.need(self.params.p, "params.p")?,
            seed: self.params.seed.unwrap_or(0),
        })
    }

    pub fn aim_params(&self) -> Result<AimParams> {
        Ok(AimParams {
            omega: self.need(self.params.omega, "params.omega")?,
        })
    }

    pub fn sens_params(&self) -> Result<SensParams> {
        Ok(SensParams {
            alpha: self.need(self.params.alpha, "params.alpha")?,
            temperature: self.need(self.params.temperature, "params.temperature")?,
        })
    }

    pub fn rank_spec(&self) -> Result<RankSpec> {
        match (self.params.rank, self.params.energy) {
            (Some(r), None) => Ok(RankSpec::Fixed(r)),
            (None, Some(e)) => Ok(RankSpec::Energy(e)),
            (Some(_), Some(_)) => Err(Error::validation("params.rank", "set either rank or energy, not both")),
            (None, None) => Err(Error::validation("params.rank", "twin needs `rank` or `energy`")),
        }
    }

    pub fn lore_params(&self) -> Result<LoreParams> {
        let d = LoreParams::default();
        let tau = match (self.params.tau, self.params.tau_abs) {
            (Some(_), Some(_)) => {
                return Err(Error::validation("params.tau", "set either tau or tau_abs, not both"))
            }
            (Some(t), None) => TauSpec::RelativeToSigmaMax(t),
            (None, Some(t)) => TauSpec::Absolute(t),
            (None, None) => d.tau,
        };
        Ok(LoreParams {
            tau,
            max_iters: self.params.max_iters.unwrap_or(d.max_iters),
            tol: self.params.tol.unwrap_or(d.tol),
            lambda: self.params.lore_lambda.unwrap_or(d.lambda),
        })
    }
}

fn fill(method: Method, p: &mut Params, scale: &mut dyn FnMut() -> Result<Scale>) -> Result<()> {
    let ties = |p: &mut Params, scale: &mut dyn FnMut() -> Result<Scale>| -> Result<()> {
        if p.k.is_none() || p.alpha.is_none() {
            let (k, a) = scale()?.defaults().ties;
            p.k.get_or_insert(k);
            p.alpha.get_or_insert(a);
        }
        Ok(())
    };
    let ta_alpha = |p: &mut Params, scale: &mut dyn FnMut() -> Result<Scale>| -> Result<()> {
        if p.alpha.is_none() {
            p.alpha = Some(scale()?.defaults().ta_alpha);
        }
        Ok(())
    };
    let dare = |p: &mut Params, scale: &mut dyn FnMut() -> Result<Scale>| -> Result<()> {
        if p.p.is_none() {
            let s = scale()?;
            p.p = Some(s.defaults().dare_p.ok_or_else(|| missing("params.p", method, s))?);
        }
        p.seed.get_or_insert(0);
        Ok(())
    };
    match method {
        Method::Average => {}
        Method::TaskArithmetic => ta_alpha(p, scale)?,
        Method::Ties => ties(p, scale)?,
        Method::DareTa => {
            dare(p, scale)?;
            ta_alpha(p, scale)?;
        }
        Method::DareTies => {
            dare(p, scale)?;
            ties(p, scale)?;
        }
        Method::Twin => ta_alpha(p, scale)?,
        Method::Lore => {
            let d = LoreParams::default();
            if p.tau.is_none() && p.tau_abs.is_none() {
                if let TauSpec::RelativeToSigmaMax(t) = d.tau {
                    p.tau = Some(t);
                }
            }
            p.max_iters.get_or_insert(d.max_iters);
            p.tol.get_or_insert(d.tol);
            p.lore_lambda.get_or_insert(d.lambda);
        }
        Method::AimPost => {
            if p.omega.is_none() {
                let s = scale()?;
                p.omega = Some(s.defaults().aim_omega.ok_or_else(|| missing("params.omega", method, s))?);
            }
        }
        Method::Sens => {
            if p.alpha.is_none() || p.temperature.is_none() {
                let s = scale()?;
                let (a, t) = s.defaults().sens.ok_or_else(|| missing("params.alpha", method, s))?;
                p.alpha.get_or_insert(a);
                p.temperature.get_or_insert(t);
            }
        }
    }
    Ok(())
}
