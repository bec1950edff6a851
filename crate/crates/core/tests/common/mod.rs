#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use l2smerge_core::tensor_store::{bf16_to_f32, f32_to_bf16};
use l2smerge_core::{compute_task_vector, DType, DtypePolicy, SkipList, TaskVector, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, scale))
}

/// Round every value to BF16 and tag the tensor as BF16-sourced.
pub fn as_bf16(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| bf16_to_f32(f32_to_bf16(v))).collect();
    Tensor::with_dtype(t.shape().to_vec(), data, DType::BF16)
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn same_bits(a: &TensorMap, b: &TensorMap) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb)
        })
}

/// Small decoder-shaped layout. The `mlp.up_proj` tensor of layer 0 is
/// larger than one DARE mask chunk.
pub const TOY_LAYOUT: &[(&str, &[usize])] = &[
    ("lm_head.weight", &[16, 8]),
    ("model.embed_tokens.weight", &[16, 8]),
    ("model.layers.0.input_layernorm.weight", &[8]),
    ("model.layers.0.mlp.up_proj.weight", &[8200, 8]),
    ("model.layers.0.self_attn.q_proj.weight", &[8, 8]),
    ("model.layers.1.input_layernorm.weight", &[8]),
    ("model.layers.1.mlp.up_proj.weight", &[12, 8]),
    ("model.layers.1.self_attn.q_proj.weight", &[8, 8]),
    ("model.norm.weight", &[8]),
];

pub const TOY_EXPERTS: [&str; 2] = ["aux", "r1"];

/// Base plus two experts that differ from it by small perturbations, all
/// stored as BF16.
pub fn toy_family(seed: u64) -> (TensorMap, Vec<(String, TensorMap)>) {
    let mut r = rng(seed);
    let mut base = TensorMap::new();
    for (name, shape) in TOY_LAYOUT {
        base.insert(*name, as_bf16(&random_tensor(&mut r, shape, 0.5)));
    }
    let experts = TOY_EXPERTS
        .iter()
        .map(|id| {
            let mut m = TensorMap::new();
            for (name, t) in base.iter() {
                let noise = uniform(&mut r, t.numel(), 0.05);
                let data = t.data().iter().zip(noise).map(|(a, b)| a + b).collect();
                m.insert(name.clone(), as_bf16(&Tensor::new(t.shape().to_vec(), data)));
            }
            (id.to_string(), m)
        })
        .collect();
    (base, experts)
}

pub fn task_vectors(base: &TensorMap, experts: &[(String, TensorMap)]) -> Vec<TaskVector> {
    let skip = SkipList::default();
    experts
        .iter()
        .map(|(id, m)| compute_task_vector(id, m, base, &skip).unwrap())
        .collect()
}

/// Write the toy family under `dir` (`base/`, `aux/`, `r1/`, `stats.json`)
/// with a `config.json` beside the base weights.
pub fn write_toy_family(dir: &Path, seed: u64) {
    let (base, experts) = toy_family(seed);
    let policy = DtypePolicy::preserve();
    fs::create_dir_all(dir.join("base")).unwrap();
    l2smerge_core::write_checkpoint(&base, dir.join("base/model.safetensors"), &policy).unwrap();
    fs::write(dir.join("base/config.json"), "{\"model_type\": \"toy\"}\n").unwrap();
    for (id, m) in &experts {
        fs::create_dir_all(dir.join(id)).unwrap();
        l2smerge_core::write_checkpoint(m, dir.join(id).join("model.safetensors"), &policy).unwrap();
    }
    fs::copy(fixture("toy_stats.json"), dir.join("stats.json")).unwrap();
}

/// Recipe text for the toy family; `params` is the body of the `[params]` table.
pub fn toy_recipe(method: &str, output: &str, params: &str) -> String {
    let stats = match method {
        "aim_post" | "sens" => "stats = \"stats.json\"\n",
        _ => "",
    };
    let mut s = format!("method = \"{method}\"\nbase = \"base\"\noutput = \"{output}\"\n{stats}\n[params]\n{params}\n");
    for id in TOY_EXPERTS {
        s.push_str(&format!("\n[[experts]]\nid = \"{id}\"\npath = \"{id}\"\n"));
    }
    s
}

/// Params that make every method runnable on the toy family.
pub fn toy_params(method: &str) -> &'static str {
    match method {
        "twin" => "rank = 2",
        "dare_ta" | "dare_ties" => "seed = 17",
        "lore" => "max_iters = 5",
        _ => "",
    }
}

pub const ALL_METHODS: [&str; 9] = [
    "average",
    "task_arithmetic",
    "ties",
    "dare_ta",
    "dare_ties",
    "twin",
    "lore",
    "aim_post",
    "sens",
];

/// Contents of every weight file in a checkpoint directory, by file name.
pub fn weight_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
