use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{MergeRecipe, Method};
use crate::activation::{aim_adjust, sens_merge, CalibrationStats};
use crate::error::{Error, Result};
use crate::lowrank::{lore_merge, twin_merge, SvdOptions};
use crate::merge::{average_merge, dare_ta, dare_ties, task_arithmetic, ties_merge, DropStats};
use crate::task_vectors::{compute_task_vector, Coefficients, LayerId, SkipList, TaskVector};
use crate::tensor_store::{
    bf16_to_f32, f32_to_bf16, load_checkpoint, write_sharded, DType, TensorMap, INDEX_FILE,
};

pub const MANIFEST_FILE: &str = "merge_manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    /// `base` or `expert`.
    pub role: String,
    pub id: String,
    pub path: PathBuf,
    pub params: u64,
    pub manifest_fingerprint: String,
    pub content_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    pub files: Vec<String>,
    /// Non-weight files carried over from the base directory.
    pub copied: Vec<String>,
    /// Fingerprint of the values as stored, after any BF16 narrowing.
    pub content_fingerprint: String,
    pub dtype_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoreTrace {
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub taus: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AimTrace {
    pub omega: f64,
    pub covered: usize,
    /// Tensors left as produced by the inner method.
    pub uncovered: Vec<String>,
}

/// Provenance record written next to every merged checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    /// Fully explicit recipe; re-running it on the same inputs reproduces the output bits.
    pub recipe: MergeRecipe,
    pub inputs: Vec<InputRecord>,
    pub output: OutputRecord,
    /// How each output tensor was produced.
    pub tensors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dare: Option<DropStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lore: Option<LoreTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twin_ranks: Option<BTreeMap<String, Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aim: Option<AimTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sens_coefficients: Option<BTreeMap<String, BTreeMap<LayerId, f64>>>,
    pub notes: Vec<String>,
    pub wall_time_secs: f64,
}

#[derive(Default)]
struct Merged {
    map: TensorMap,
    trace: BTreeMap<String, String>,
    dare: Option<DropStats>,
    lore: Option<LoreTrace>,
    twin_ranks: Option<BTreeMap<String, Vec<usize>>>,
    aim: Option<AimTrace>,
    sens: Option<BTreeMap<String, BTreeMap<LayerId, f64>>>,
    notes: Vec<String>,
}

struct Inputs {
    base: TensorMap,
    experts: Vec<(String, TensorMap)>,
    skip: SkipList,
    stats: Option<CalibrationStats>,
}

impl Inputs {
    fn task_vectors(&self) -> Result<Vec<TaskVector>> {
        self.experts
            .iter()
            .map(|(id, m)| compute_task_vector(id, m, &self.base, &self.skip))
            .collect()
    }

    fn stats(&self) -> &CalibrationStats {
        self.stats.as_ref().expect("finalized recipe carries stats")
    }

    /// Base followed by experts, each without skipped tensors.
    fn all_models(&self) -> Vec<TensorMap> {
        std::iter::once(&self.base)
            .chain(self.experts.iter().map(|(_, m)| m))
            .map(|m| {
                m.iter()
                    .filter(|(n, _)| !self.skip.matches(n))
                    .map(|(n, t)| (n.clone(), t.clone()))
                    .collect()
            })
            .collect()
    }

    fn restore_skipped(&self, map: &mut TensorMap) {
        for (name, t) in self.base.iter() {
            if self.skip.matches(name) {
                map.insert(name.clone(), t.clone());
            }
        }
        *map.metadata_mut() = self.base.metadata().clone();
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn lambda_label(coeffs: &Coefficients, ids: &[&str], name: &str) -> String {
    let parts: Vec<String> = ids
        .iter()
        .map(|id| match coeffs.lambda(id, name) {
            Ok(v) => format!("{id}={}", fmt_num(v)),
            Err(_) => format!("{id}=?"),
        })
        .collect();
    format!("lambda{{{}}}", parts.join(", "))
}

fn label_all(map: &TensorMap, skip: &SkipList, f: impl Fn(&str) -> String) -> BTreeMap<String, String> {
    map.names()
        .map(|n| {
            let label = if skip.matches(n) {
                "passthrough (skip)".to_string()
            } else {
                f(n)
            };
            (n.clone(), label)
        })
        .collect()
}

const NOTE_ORDER: &str =
    "reductions over experts accumulate in FP64 in sorted model-id order and round once to FP32";

fn merge_with(method: Method, recipe: &MergeRecipe, inputs: &Inputs) -> Result<Merged> {
    let ids = recipe.expert_ids();
    let mut sorted_ids = ids.clone();
    sorted_ids.sort_unstable();
    let skip = &inputs.skip;
    let mut out = Merged {
        notes: vec![NOTE_ORDER.to_string()],
        ..Default::default()
    };
    match method {
        Method::Average => {
            let models = inputs.all_models();
            let refs: Vec<&TensorMap> = models.iter().collect();
            out.map = average_merge(&refs)?;
            inputs.restore_skipped(&mut out.map);
            let n = refs.len();
            out.trace = label_all(&out.map, skip, |_| format!("average over {n} models"));
            out.notes.push("average: the base model and every expert weigh equally".into());
        }
        Method::TaskArithmetic => {
            let coeffs = recipe.coefficients()?;
            out.map = task_arithmetic(&inputs.base, &inputs.task_vectors()?, &coeffs)?;
            out.trace = label_all(&out.map, skip, |n| {
                format!("task_arithmetic {}", lambda_label(&coeffs, &sorted_ids, n))
            });
        }
        Method::Ties => {
            let p = recipe.ties_params()?;
            out.map = ties_merge(&inputs.base, &inputs.task_vectors()?, &p)?;
            let label = format!("ties k={} alpha={}", fmt_num(p.trim_ratio), fmt_num(p.alpha));
            out.trace = label_all(&out.map, skip, |_| label.clone());
            out.notes.push("ties: k is the fraction of smallest-magnitude delta entries zeroed per tensor; ties in magnitude zero the higher index first; the elected sign is the sign of the summed trimmed deltas".into());
        }
        Method::DareTa | Method::DareTies => {
            let d = recipe.dare_params()?;
            let vectors = inputs.task_vectors()?;
            let dare_label = format!("p={} seed={}", fmt_num(d.drop_rate), d.seed);
            if method == Method::DareTa {
                let coeffs = recipe.coefficients()?;
                let (map, stats) = dare_ta(&inputs.base, &vectors, &d, &coeffs)?;
                out.map = map;
                out.dare = Some(stats);
                out.trace = label_all(&out.map, skip, |n| {
                    format!("dare_ta {dare_label} {}", lambda_label(&coeffs, &sorted_ids, n))
                });
            } else {
                let t = recipe.ties_params()?;
                let (map, stats) = dare_ties(&inputs.base, &vectors, &d, &t)?;
                out.map = map;
                out.dare = Some(stats);
                let label = format!(
                    "dare_ties {dare_label} k={} alpha={}",
                    fmt_num(t.trim_ratio),
                    fmt_num(t.alpha)
                );
                out.trace = label_all(&out.map, skip, |_| label.clone());
            }
            out.notes.push("dare: the expert at sorted position j uses seed + j; each tensor draws from a SplitMix64 stream seeded with that value XOR FNV-1a-64 of its name; an entry is kept when its unit draw is >= p and kept entries are scaled by 1/(1-p) in FP64".into());
        }
        Method::Twin => {
            let coeffs = recipe.coefficients()?;
            let spec = recipe.rank_spec()?;
            let opts = SvdOptions::default();
            let res = twin_merge(&inputs.base, &inputs.task_vectors()?, spec, &coeffs, &opts)?;
            out.map = res.merged;
            out.trace = label_all(&out.map, skip, |n| {
                let lam = lambda_label(&coeffs, &sorted_ids, n);
                match res.ranks.get(n) {
                    Some(r) => format!("twin rank={r:?} {lam}"),
                    None => format!("twin 1-D delta kept {lam}"),
                }
            });
            out.twin_ranks = Some(res.ranks);
            out.notes.push(format!(
                "twin: each 2-D delta is replaced by its truncated SVD; exact one-sided Jacobi up to min dimension {}, randomized range finder (oversample {}, {} power iterations, fixed seed) above",
                opts.dense_cap, opts.oversample, opts.power_iters
            ));
        }
        Method::Lore => {
            let p = recipe.lore_params()?;
            let models = inputs.all_models();
            let refs: Vec<&TensorMap> = models.iter().collect();
            let res = lore_merge(&refs, &p, &SvdOptions::default())?;
            out.map = res.merged;
            inputs.restore_skipped(&mut out.map);
            let iters = res.iterations;
            out.trace = label_all(&out.map, skip, |n| match res.taus.get(n) {
                Some(t) => format!("lore tau={} sweeps<={iters}", fmt_num(*t)),
                None => format!("lore sweeps<={iters}"),
            });
            out.lore = Some(LoreTrace {
                objective: res.objective,
                iterations: iters,
                taus: res.taus,
            });
            out.notes.push("lore: the base model and every expert are the inputs; per tensor, coordinate descent alternates the shared estimate (mean of inputs minus their low-rank parts) with singular value thresholding of each centered input; a relative tau is a fraction of the largest singular value among the centered inputs".into());
        }
        Method::Sens => {
            let p = recipe.sens_params()?;
            let layers = recipe.layer_assigner()?;
            let (map, coeffs) =
                sens_merge(&inputs.base, &inputs.task_vectors()?, inputs.stats(), &p, &layers)?;
            out.map = map;
            out.trace = label_all(&out.map, skip, |n| {
                format!("sens layer={} {}", layers.assign(n), lambda_label(&coeffs, &sorted_ids, n))
            });
            out.sens = Some(coeffs.per_layer().clone());
            out.notes.push("sens: layer scores are divided by the model's largest score, passed through a softmax with temperature T after max subtraction, and lambda = alpha * L * softmax * g where g is the task score normalized to mean 1 over experts".into());
        }
        Method::AimPost => {
            let inner = recipe.params.inner.unwrap_or(Method::Ties);
            let mut res = merge_with(inner, recipe, inputs)?;
            let p = recipe.aim_params()?;
            let aim = aim_adjust(&inputs.base, &res.map, inputs.stats(), &p)?;
            let mut uncovered = Vec::new();
            for (name, label) in res.trace.iter_mut() {
                if aim.covered.contains(name) {
                    *label = format!("aim omega={} after {label}", fmt_num(p.omega));
                } else if !skip.matches(name) {
                    uncovered.push(name.clone());
                    label.push_str("; aim passthrough (no row statistics)");
                }
            }
            res.aim = Some(AimTrace {
                omega: p.omega,
                covered: aim.covered.len(),
                uncovered,
            });
            res.map = aim.merged;
            res.notes.push("aim: per output row, the change from the base is scaled by 1 - (1 - omega) * a / max(a) using the row's activation importance a".into());
            return Ok(res);
        }
    }
    Ok(out)
}

fn fingerprint_input(role: &str, id: &str, path: &Path, map: &TensorMap) -> InputRecord {
    InputRecord {
        role: role.to_string(),
        id: id.to_string(),
        path: path.to_path_buf(),
        params: map.param_count() as u64,
        manifest_fingerprint: map.manifest_fingerprint(),
        content_fingerprint: map.content_fingerprint(),
    }
}

fn is_weight_file(name: &str) -> bool {
    name.ends_with(".safetensors") || name.ends_with(".safetensors.index.json") || name == INDEX_FILE
}

/// Copy tokenizer, config and other non-weight files from the base directory.
fn copy_extras(base: &Path, dest: &Path) -> Result<Vec<String>> {
    let mut copied = Vec::new();
    if !base.is_dir() {
        return Ok(copied);
    }
    let entries = fs::read_dir(base).map_err(|e| Error::io(base, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(base, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    for path in files {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if is_weight_file(name) || name == MANIFEST_FILE {
            continue;
        }
        let target = dest.join(name);
        fs::copy(&path, &target).map_err(|e| Error::io(&path, e))?;
        copied.push(name.to_string());
    }
    Ok(copied)
}

fn round_to_storage(map: &mut TensorMap, recipe: &MergeRecipe) -> BTreeMap<String, usize> {
    let policy = recipe.dtype_policy();
    let names: Vec<String> = map.names().cloned().collect();
    let mut counts = BTreeMap::new();
    for name in names {
        let t = map.get_mut(&name).unwrap();
        let dtype = policy.resolve(&name, t.source_dtype());
        *counts.entry(dtype.to_string()).or_insert(0) += 1;
        if dtype == DType::BF16 {
            for v in t.data_mut() {
                *v = bf16_to_f32(f32_to_bf16(*v));
            }
        }
    }
    counts
}

fn install(tmp: tempfile::TempDir, out: &Path, parent: &Path) -> Result<()> {
    let staged = tmp.keep();
    let result = (|| {
        if out.exists() {
            let old = tempfile::Builder::new()
                .prefix(".l2smerge-old-")
                .tempdir_in(parent)
                .map_err(|e| Error::io(parent, e))?;
            let prev = old.path().join("prev");
            fs::rename(out, &prev).map_err(|e| Error::io(out, e))?;
            if let Err(e) = fs::rename(&staged, out) {
                let _ = fs::rename(&prev, out);
                return Err(Error::io(out, e));
            }
            Ok(())
        } else {
            fs::rename(&staged, out).map_err(|e| Error::io(out, e))
        }
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staged);
    }
    result
}

/// Load the inputs, merge, and atomically write the checkpoint plus
/// [`MANIFEST_FILE`] into the recipe's output directory. An existing output
/// directory is replaced only if it holds a previous merge manifest. On any
/// error nothing is left behind.
pub fn run_merge(recipe: &MergeRecipe) -> Result<MergeManifest> {
    let started = Instant::now();
    let out = recipe.output()?.to_path_buf();
    if out.exists() && !out.join(MANIFEST_FILE).is_file() {
        return Err(Error::validation(
            "output",
            format!("{} exists and is not a previous merge output", out.display()),
        ));
    }
    let skip = recipe.skip_list()?;
    let stats = match (&recipe.stats, recipe.method) {
        (Some(p), Method::AimPost | Method::Sens) => Some(CalibrationStats::load(p)?),
        _ => None,
    };

    log::info!("loading base {}", recipe.base.display());
    let base = load_checkpoint(&recipe.base)?;
    let mut inputs_rec = vec![fingerprint_input("base", "base", &recipe.base, &base)];
    let mut experts = Vec::with_capacity(recipe.experts.len());
    for e in &recipe.experts {
        log::info!("loading expert `{}` from {}", e.id, e.path.display());
        let m = load_checkpoint(&e.path)?;
        base.check_same_manifest(&m, &format!("expert `{}`", e.id))?;
        inputs_rec.push(fingerprint_input("expert", &e.id, &e.path, &m));
        experts.push((e.id.clone(), m));
    }
    let inputs = Inputs {
        base,
        experts,
        skip,
        stats,
    };

    log::info!("merging with `{}`", recipe.method);
    let mut merged = merge_with(recipe.method, recipe, &inputs)?;
    drop(inputs);

    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".l2smerge-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;

    let policy = recipe.dtype_policy();
    let written = write_sharded(
        &merged.map,
        tmp.path(),
        &policy,
        recipe.max_shard_size.unwrap_or(u64::MAX),
    )?;
    let copied = copy_extras(&recipe.base, tmp.path())?;
    let dtype_counts = round_to_storage(&mut merged.map, recipe);

    let files = written
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    let manifest = MergeManifest {
        manifest_version: MANIFEST_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        recipe: recipe.clone(),
        inputs: inputs_rec,
        output: OutputRecord {
            path: out.clone(),
            files,
            copied,
            content_fingerprint: merged.map.content_fingerprint(),
            dtype_counts,
        },
        tensors: merged.trace,
        dare: merged.dare,
        lore: merged.lore,
        twin_ranks: merged.twin_ranks,
        aim: merged.aim,
        sens_coefficients: merged.sens,
        notes: merged.notes,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path = tmp.path().join(MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    install(tmp, &out, &parent)?;
    log::info!("wrote {} in {:.2}s", out.display(), manifest.wall_time_secs);
    Ok(manifest)
}
