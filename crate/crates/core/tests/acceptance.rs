//! Acceptance suite: one PASS/FAIL line per criterion, each with its time budget.
//! Run with `cargo test -p l2smerge-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use l2smerge_core::activation::{aim_adjust, sens_coefficients, AimParams, CalibrationStats, SensParams};
use l2smerge_core::linalg::Matrix;
use l2smerge_core::lowrank::{lore_merge, svt, truncated_svd, LoreParams, SvdOptions, TauSpec};
use l2smerge_core::merge::{average_merge, dare_drop, task_arithmetic, ties_merge, DareParams, TiesParams};
use l2smerge_core::metrics::{
    length_reduction, read_responses, CorpusAccumulator, CorpusReport, DatasetStats, Matching, ReflectionDetector,
    ResponseRecord,
};
use l2smerge_core::recipe::{run_merge, MergeRecipe};
use l2smerge_core::tensor_store::{bf16_to_f32, f32_to_bf16};
use l2smerge_core::{load_checkpoint, write_checkpoint, Coefficients, DType, DtypePolicy, LayerId, TaskVector, Tensor, TensorMap};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::Deserialize;

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- results table

#[derive(Deserialize)]
struct Table1 {
    datasets: Vec<String>,
    baseline: String,
    rows: Vec<Table1Row>,
}

#[derive(Deserialize)]
struct Table1Row {
    model: String,
    lengths: Vec<f64>,
    accuracy: Vec<f64>,
    avg_accuracy: f64,
    avg_length_change: Option<f64>,
}

fn report_of(datasets: &[String], row: &Table1Row) -> CorpusReport {
    let stats = datasets
        .iter()
        .zip(row.lengths.iter().zip(&row.accuracy))
        .map(|(d, (&len, &acc))| (d.clone(), DatasetStats::from_summary(len, Some(acc / 100.0))))
        .collect();
    CorpusReport::from_datasets(Matching::Substring, stats)
}

fn table1() -> Outcome {
    let t: Table1 = serde_json::from_str(&fs::read_to_string(fixture("table1_7b.json")).unwrap()).unwrap();
    let baseline_row = t.rows.iter().find(|r| r.model == t.baseline).unwrap();
    let baseline = report_of(&t.datasets, baseline_row);
    let mut misses = Vec::new();
    let mut reductions = 0;
    for row in &t.rows {
        let report = report_of(&t.datasets, row);
        let acc = 100.0 * report.macro_avg.accuracy.unwrap();
        if (acc - row.avg_accuracy).abs() > 0.05 {
            misses.push(format!("{} accuracy {acc:.3} vs {}", row.model, row.avg_accuracy));
        }
        if let Some(printed) = row.avg_length_change {
            reductions += 1;
            let change = -100.0 * length_reduction(&report, &baseline).unwrap().macro_reduction;
            if (change - printed).abs() > 0.15 {
                misses.push(format!("{} length change {change:.2} vs {printed}", row.model));
            }
        }
    }
    ensure!(reductions == 11, "expected 11 reduction cells, found {reductions}");
    ensure!(misses.is_empty(), "{}", misses.join("; "));
    Ok(format!("{} accuracies, {reductions} length changes", t.rows.len()))
}

// ---------------------------------------------------------------- TA / average

fn small_checkpoint(r: &mut rand_chacha::ChaCha8Rng) -> TensorMap {
    let mut m = TensorMap::new();
    for name in ["model.layers.0.w", "model.layers.1.w"] {
        m.insert(name, random_tensor(r, &[8, 8], 1.0));
    }
    m.insert("model.norm.weight", random_tensor(r, &[8], 1.0));
    m
}

fn ta_identities() -> Outcome {
    let mut r = rng(1);
    for case in 0..100 {
        let k = r.random_range(2..=4usize);
        let models: Vec<TensorMap> = (0..k).map(|_| small_checkpoint(&mut r)).collect();
        let base = &models[0];
        let experts: Vec<(String, TensorMap)> =
            models[1..].iter().enumerate().map(|(i, m)| (format!("e{i}"), m.clone())).collect();
        let vectors = task_vectors(base, &experts);
        let ids: Vec<&str> = experts.iter().map(|(id, _)| id.as_str()).collect();

        let zero = task_arithmetic(base, &vectors, &Coefficients::uniform(&ids, 0.0)).unwrap();
        ensure!(same_bits(&zero, base), "case {case}: lambda = 0 changed the base");

        let refs: Vec<&TensorMap> = models.iter().collect();
        let avg = average_merge(&refs).unwrap();
        let ta = task_arithmetic(base, &vectors, &Coefficients::uniform(&ids, 1.0 / k as f64)).unwrap();
        for (name, a) in avg.iter() {
            let t = ta.get(name).unwrap();
            for (i, (&x, &y)) in a.data().iter().zip(t.data()).enumerate() {
                let scale = models.iter().map(|m| m.get(name).unwrap().data()[i].abs()).fold(0.0f32, f32::max);
                ensure!(
                    (x - y).abs() as f64 <= 1e-6 * scale as f64,
                    "case {case}: {name}[{i}] average {x} vs TA {y}"
                );
            }
        }

        let copies: Vec<&TensorMap> = (0..k).map(|_| base).collect();
        ensure!(same_bits(&average_merge(&copies).unwrap(), base), "case {case}: average of copies");
        let same: Vec<(String, TensorMap)> = (0..k).map(|i| (format!("e{i}"), base.clone())).collect();
        let zeros = task_vectors(base, &same);
        let ids: Vec<String> = same.iter().map(|(id, _)| id.clone()).collect();
        let merged = task_arithmetic(base, &zeros, &Coefficients::uniform(&ids, 1.0 / k as f64)).unwrap();
        ensure!(same_bits(&merged, base), "case {case}: TA of identical models");
    }
    Ok("100 checkpoints".into())
}

// ---------------------------------------------------------------- TIES oracle

/// Zero the `⌊pct·n/100⌋` smallest magnitudes; among equal magnitudes the
/// higher index goes first.
fn oracle_trim(d: &[f32], pct: usize) -> Vec<f32> {
    let m = d.len() * pct / 100;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()).then(b.cmp(&a)));
    let mut out = d.to_vec();
    for &i in &order[..m] {
        out[i] = 0.0;
    }
    out
}

fn oracle_ties(base: &[f32], deltas: &[Vec<f32>], pct: usize, alpha: f64) -> Vec<f32> {
    let trimmed: Vec<Vec<f32>> = deltas.iter().map(|d| oracle_trim(d, pct)).collect();
    (0..base.len())
        .map(|i| {
            let total: f64 = trimmed.iter().map(|t| t[i] as f64).sum();
            let sign = if total > 0.0 { 1.0 } else if total < 0.0 { -1.0 } else { 0.0 };
            let agree: Vec<f64> = trimmed
                .iter()
                .map(|t| t[i] as f64)
                .filter(|&x| x != 0.0 && x.signum() == sign)
                .collect();
            if agree.is_empty() {
                return base[i];
            }
            let mean = agree.iter().sum::<f64>() / agree.len() as f64;
            (base[i] as f64 + alpha * mean) as f32
        })
        .collect()
}

fn ties_oracle() -> Outcome {
    let mut r = rng(2);
    let shapes: [&[usize]; 3] = [&[8, 8], &[5, 7], &[8]];
    for case in 0..200 {
        let k = r.random_range(2..=4usize);
        let pct = *[0usize, 10, 20, 25, 50, 80, 90].choose(&mut r).unwrap();
        let alpha = *[1.0, 0.5, 0.55].choose(&mut r).unwrap();
        // half the cases draw from a coarse grid so ties and cancellations occur
        let coarse = case % 2 == 0;
        let mut draw = |n: usize| -> Vec<f32> {
            if coarse {
                (0..n).map(|_| r.random_range(-4i32..=4) as f32 / 8.0).collect()
            } else {
                uniform(&mut r, n, 1.0)
            }
        };
        let mut base = TensorMap::new();
        let mut experts = Vec::new();
        for (j, s) in shapes.iter().enumerate() {
            base.insert(format!("model.layers.{j}.w"), Tensor::new(s.to_vec(), draw(s.iter().product())));
        }
        for e in 0..k {
            let mut m = TensorMap::new();
            for (name, t) in base.iter() {
                let d = draw(t.numel());
                m.insert(name.clone(), t.like(t.data().iter().zip(d).map(|(a, b)| a + b).collect()));
            }
            experts.push((format!("e{e}"), m));
        }
        let mut vectors = task_vectors(&base, &experts);
        vectors.shuffle(&mut r);
        let params = TiesParams {
            trim_ratio: pct as f64 / 100.0,
            alpha,
        };
        let merged = ties_merge(&base, &vectors, &params).unwrap();
        vectors.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        for (name, b) in base.iter() {
            let deltas: Vec<Vec<f32>> = vectors.iter().map(|v| v.deltas[name].data().to_vec()).collect();
            let want = oracle_ties(b.data(), &deltas, pct, alpha);
            let got = merged.get(name).unwrap().data();
            let want_bits: Vec<u32> = want.iter().map(|v| v.to_bits()).collect();
            let got_bits: Vec<u32> = got.iter().map(|v| v.to_bits()).collect();
            ensure!(got_bits == want_bits, "case {case} ({name}, k={pct}%, {k} models): {got:?} vs {want:?}");
        }
    }
    Ok("200 checkpoints, bitwise".into())
}

// ---------------------------------------------------------------- DARE

fn single_vector(name: &str, data: Vec<f32>) -> TaskVector {
    let mut deltas = BTreeMap::new();
    deltas.insert(name.to_string(), Tensor::new(vec![data.len()], data));
    TaskVector {
        model_id: "m".into(),
        base_fingerprint: String::new(),
        deltas,
        skipped: Default::default(),
    }
}

fn dare() -> Outcome {
    let mut r = rng(3);
    let delta = uniform(&mut r, 256, 1.0);
    let v = single_vector("model.layers.0.w", delta.clone());
    let mut worst_mean = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for p in [0.1, 0.3, 0.5] {
        let mut sums = vec![0.0f64; delta.len()];
        for seed in 0..10_000u64 {
            let (d, _) = dare_drop(&v, &DareParams { drop_rate: p, seed }).unwrap();
            for (s, &x) in sums.iter_mut().zip(d.deltas["model.layers.0.w"].data()) {
                *s += x as f64;
            }
        }
        for (i, &x) in delta.iter().enumerate() {
            if x.abs() <= 0.1 {
                continue;
            }
            let rel = (sums[i] / 10_000.0 - x as f64).abs() / x.abs() as f64;
            ensure!(rel <= 0.05, "p={p}: entry {i} mean off by {:.2}%", 100.0 * rel);
            worst_mean = worst_mean.max(rel);
        }

        let n = 100_000usize;
        let big = single_vector("model.layers.1.w", vec![1.0; n]);
        for seed in [0u64, 1, 42] {
            let (_, stats) = dare_drop(&big, &DareParams { drop_rate: p, seed }).unwrap();
            let expected = n as f64 * (1.0 - p);
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let z = (stats.kept as f64 - expected).abs() / sigma;
            ensure!(z <= 3.0, "p={p} seed={seed}: kept {} is {z:.2} sigma from {expected}", stats.kept);
            worst_sigma = worst_sigma.max(z);
        }
    }
    Ok(format!("worst mean error {:.2}%, worst density {worst_sigma:.2} sigma", 100.0 * worst_mean))
}

// ---------------------------------------------------------------- SVD

fn svd_suite() -> Outcome {
    let mut r = rng(4);
    let opts = SvdOptions::default();
    let mut checked = 0;
    for _ in 0..40 {
        let m = r.random_range(1..=64usize);
        let n = r.random_range(1..=64usize);
        let data: Vec<f64> = (0..m * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = Matrix::from_vec(m, n, data.clone());
        let reference = nalgebra::DMatrix::from_row_slice(m, n, &data).singular_values();
        let mut sigma: Vec<f64> = reference.iter().copied().collect();
        sigma.sort_by(|x, y| y.total_cmp(x));
        let total = a.frobenius_sq();
        for rank in [1, 2, m.min(n) / 2, m.min(n).saturating_sub(1), m.min(n)] {
            if rank == 0 {
                continue;
            }
            let f = truncated_svd(&a, rank, &opts).unwrap();
            let err = a.sub(&f.reconstruct()).frobenius_sq();
            let discarded: f64 = sigma.iter().skip(rank).map(|s| s * s).sum();
            let bound = 1e-8 * if discarded > 0.0 { discarded } else { total };
            ensure!(
                (err - discarded).abs() <= bound,
                "{m}x{n} rank {rank}: error {err:e} vs discarded {discarded:e}"
            );
            checked += 1;
        }
        let same = svt(&a, 0.0, &opts).unwrap();
        ensure!(same == a, "{m}x{n}: SVT with tau = 0 changed the matrix");
        let smax = sigma[0];
        let at = svt(&a, smax, &opts).unwrap().max_abs();
        ensure!(at <= 1e-12 * smax, "{m}x{n}: SVT at sigma_max left {at:e}");
        let above = svt(&a, 1.5 * smax, &opts).unwrap().max_abs();
        ensure!(above == 0.0, "{m}x{n}: SVT above sigma_max left {above:e}");
    }
    Ok(format!("{checked} truncations against a reference SVD"))
}

// ---------------------------------------------------------------- LoRE

fn lore_monotone() -> Outcome {
    let mut r = rng(5);
    let opts = SvdOptions::default();
    let mut sweeps = 0;
    for case in 0..50 {
        let rows = r.random_range(3..=12usize);
        let cols = r.random_range(3..=12usize);
        let shared = random_tensor(&mut r, &[rows, cols], 1.0);
        let models: Vec<TensorMap> = (0..2)
            .map(|_| {
                let mut m = TensorMap::new();
                let noise = uniform(&mut r, rows * cols, 0.3);
                let w = shared.data().iter().zip(noise).map(|(a, b)| a + b).collect();
                m.insert("model.layers.0.w", shared.like(w));
                m.insert("model.layers.0.b", random_tensor(&mut r, &[cols], 1.0));
                m
            })
            .collect();
        let refs: Vec<&TensorMap> = models.iter().collect();
        let params = LoreParams {
            tau: TauSpec::RelativeToSigmaMax(r.random_range(0.05..0.5)),
            max_iters: 20,
            tol: 0.0,
            lambda: 1.0,
        };
        let out = lore_merge(&refs, &params, &opts).unwrap();
        ensure!(out.iterations == 20, "case {case}: stopped after {} sweeps", out.iterations);
        for w in out.objective.windows(2) {
            ensure!(w[1] <= w[0] * (1.0 + 1e-12), "case {case}: objective rose {} -> {}", w[0], w[1]);
        }
        sweeps += out.iterations;

        let exact = LoreParams {
            tau: TauSpec::Absolute(0.0),
            ..params
        };
        let out = lore_merge(&refs, &exact, &opts).unwrap();
        ensure!(
            out.iterations == 1 && out.objective[1] == 0.0,
            "case {case}: tau = 0 gave {:?} after {} sweeps",
            out.objective,
            out.iterations
        );
    }
    Ok(format!("50 instances, {sweeps} sweeps"))
}

// ---------------------------------------------------------------- AIM

fn stats_with_rows(rows: BTreeMap<String, Vec<f64>>) -> CalibrationStats {
    CalibrationStats {
        schema_version: 1,
        activation: rows,
        ..Default::default()
    }
}

fn aim_bounds() -> Outcome {
    let mut r = rng(6);
    for case in 0..100 {
        let (m, n) = (r.random_range(2..=12usize), r.random_range(1..=8usize));
        let mut base = TensorMap::new();
        let mut merged = TensorMap::new();
        base.insert("model.layers.0.w", random_tensor(&mut r, &[m, n], 1.0));
        merged.insert("model.layers.0.w", random_tensor(&mut r, &[m, n], 1.0));
        // rows that share base and delta, so movement is a function of importance alone
        let row = uniform(&mut r, n, 1.0);
        let step = uniform(&mut r, n, 1.0);
        base.insert("model.layers.1.w", Tensor::new(vec![m, n], row.repeat(m)));
        let moved: Vec<f32> = row.iter().zip(&step).map(|(a, b)| a + b).collect();
        merged.insert("model.layers.1.w", Tensor::new(vec![m, n], moved.repeat(m)));
        let mut rows = BTreeMap::new();
        for name in ["model.layers.0.w", "model.layers.1.w"] {
            rows.insert(name.to_string(), (0..m).map(|_| r.random_range(0.0..3.0)).collect::<Vec<f64>>());
        }
        let stats = stats_with_rows(rows.clone());

        for omega in [0.0, 0.4, 1.0] {
            let out = aim_adjust(&base, &merged, &stats, &AimParams { omega }).unwrap().merged;
            if omega == 1.0 {
                ensure!(same_bits(&out, &merged), "case {case}: omega = 1 differs from merged");
            }
            for (name, o) in out.iter() {
                let (b, mm) = (base.get(name).unwrap().data(), merged.get(name).unwrap().data());
                for (i, &x) in o.data().iter().enumerate() {
                    let (lo, hi) = (b[i].min(mm[i]), b[i].max(mm[i]));
                    ensure!(lo <= x && x <= hi, "case {case}, omega {omega}: {name}[{i}] = {x} outside [{lo}, {hi}]");
                }
            }
            let imp = &rows["model.layers.1.w"];
            let o = out.get("model.layers.1.w").unwrap().data();
            for i in 0..m {
                for j in 0..m {
                    if imp[i] < imp[j] {
                        continue;
                    }
                    for c in 0..n {
                        let (mi, mj) = ((o[i * n + c] - row[c]).abs(), (o[j * n + c] - row[c]).abs());
                        ensure!(mi <= mj, "case {case}, omega {omega}: row {i} moved more than less important row {j}");
                    }
                }
            }
        }
    }
    Ok("100 instances x 3 omegas".into())
}

// ---------------------------------------------------------------- Sens

fn sens_stats(layers: &[LayerId], scores: &BTreeMap<String, Vec<f64>>, task: &BTreeMap<String, f64>) -> CalibrationStats {
    CalibrationStats {
        schema_version: 1,
        layer_sensitivity: scores
            .iter()
            .map(|(m, s)| (m.clone(), layers.iter().cloned().zip(s.iter().copied()).collect()))
            .collect(),
        task_sensitivity: task.clone(),
        ..Default::default()
    }
}

fn sens_contract() -> Outcome {
    let mut r = rng(7);
    for case in 0..200 {
        let k = r.random_range(1..=4usize);
        let nl = r.random_range(1..=40usize);
        let mut layers: Vec<LayerId> = (0..nl as u32 - 1).map(LayerId::Index).collect();
        layers.push(LayerId::Global);
        let ids: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
        let alpha = r.random_range(0.1..1.5);
        let temperature = r.random_range(0.5..8.0);
        let lambda = |c: &Coefficients, id: &str, l: &LayerId| c.per_layer()[id][l];

        let flat = r.random_range(0.1..5.0);
        let uniform_scores = ids.iter().map(|id| (id.clone(), vec![flat; nl])).collect();
        let uniform_task = ids.iter().map(|id| (id.clone(), 2.0)).collect();
        let stats = sens_stats(&layers, &uniform_scores, &uniform_task);
        let c = sens_coefficients(&stats, &SensParams { alpha, temperature }, &ids, &layers).unwrap();
        for id in &ids {
            for l in &layers {
                let v = lambda(&c, id, l);
                ensure!(v == alpha, "case {case}: uniform stats gave {v} for alpha {alpha} ({nl} layers)");
            }
        }

        let scores = ids
            .iter()
            .map(|id| (id.clone(), (0..nl).map(|_| r.random_range(0.0..10.0)).collect()))
            .collect();
        let task: BTreeMap<String, f64> = ids.iter().map(|id| (id.clone(), r.random_range(0.05..3.0))).collect();
        let total: f64 = task.values().sum();
        let g = |id: &str| task[id] * k as f64 / total;
        let stats = sens_stats(&layers, &scores, &task);
        let c = sens_coefficients(&stats, &SensParams { alpha, temperature }, &ids, &layers).unwrap();
        for id in &ids {
            let mean = layers.iter().map(|l| lambda(&c, id, l) / g(id)).sum::<f64>() / nl as f64;
            ensure!((mean - alpha).abs() <= 1e-6, "case {case}: mean of lambda/g is {mean}, alpha {alpha}");
        }
        let hot = sens_coefficients(&stats, &SensParams { alpha, temperature: 1e6 }, &ids, &layers).unwrap();
        for id in &ids {
            for l in &layers {
                let v = lambda(&hot, id, l);
                ensure!((v - alpha * g(id)).abs() <= 1e-4, "case {case}: T = 1e6 gave {v}, limit {}", alpha * g(id));
            }
        }
    }
    Ok("200 instances".into())
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_toy_family(dir.path(), 8);
    let mut runs = 0;
    for method in ALL_METHODS {
        let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
        for threads in [1usize, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            for rep in 0..2 {
                let out = format!("out/{method}-{threads}-{rep}");
                let text = toy_recipe(method, &out, toy_params(method));
                let recipe = MergeRecipe::from_toml(&text, dir.path()).and_then(|r| r.finalize());
                let recipe = recipe.map_err(|e| format!("{method}: {e}"))?;
                pool.install(|| run_merge(&recipe)).map_err(|e| format!("{method}: {e}"))?;
                let files = weight_files(&dir.path().join(&out));
                match &reference {
                    None => reference = Some(files),
                    Some(want) => ensure!(&files == want, "{method}: run with {threads} threads (rep {rep}) differs"),
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{} methods, {runs} runs", ALL_METHODS.len()))
}

// ---------------------------------------------------------------- I/O

fn random_container(r: &mut rand_chacha::ChaCha8Rng) -> TensorMap {
    let mut m = TensorMap::new();
    for i in 0..r.random_range(1..=6usize) {
        let rank = r.random_range(1..=3usize);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=9usize)).collect();
        let n: usize = shape.iter().product();
        let bf16 = r.random_bool(0.5);
        let data: Vec<f32> = (0..n)
            .map(|_| match r.random_range(0..10) {
                0 => f32::from_bits(r.random()),
                1 => [0.0, -0.0, f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE / 4.0][r.random_range(0..5)],
                _ => r.random_range(-100.0..100.0),
            })
            .collect();
        let t = Tensor::new(shape, data);
        let t = if bf16 { as_bf16(&t) } else { t };
        m.insert(format!("model.layers.{i}.t{}", r.random_range(0..1000)), t);
    }
    if r.random_bool(0.5) {
        m.metadata_mut().insert("format".into(), "pt".into());
    }
    m
}

/// Round-to-nearest-even onto BF16 by comparing distances in FP64.
fn reference_bf16(x: f32) -> f32 {
    if x.is_nan() || x.is_infinite() {
        return x;
    }
    let lo_bits = x.to_bits() & 0xffff_0000;
    let lo = f32::from_bits(lo_bits) as f64;
    let hi_bits = lo_bits + 0x1_0000;
    // one step past the largest finite BF16 sits at 2^128 in magnitude
    let hi = if hi_bits & 0x7fff_0000 == 0x7f80_0000 {
        2f64.powi(128).copysign(x as f64)
    } else {
        f32::from_bits(hi_bits) as f64
    };
    let (dl, dh) = ((x as f64 - lo).abs(), (hi - x as f64).abs());
    let pick_hi = dh < dl || (dh == dl && (lo_bits >> 16) & 1 == 1);
    if pick_hi {
        f32::from_bits(hi_bits)
    } else {
        f32::from_bits(lo_bits)
    }
}

fn io_roundtrip() -> Outcome {
    let mut r = rng(9);
    let dir = tempfile::tempdir().unwrap();
    let policy = DtypePolicy::preserve();
    for case in 0..100 {
        let m = random_container(&mut r);
        let (a, b) = (dir.path().join(format!("{case}a.safetensors")), dir.path().join(format!("{case}b.safetensors")));
        write_checkpoint(&m, &a, &policy).unwrap();
        let first = load_checkpoint(&a).unwrap();
        write_checkpoint(&first, &b, &policy).unwrap();
        let second = load_checkpoint(&b).unwrap();
        ensure!(same_bits(&first, &second), "case {case}: values changed across a roundtrip");
        ensure!(first.metadata() == second.metadata(), "case {case}: metadata changed");
        ensure!(fs::read(&a).unwrap() == fs::read(&b).unwrap(), "case {case}: file bytes changed");
        for (name, t) in m.iter() {
            let back = first.get(name).unwrap();
            ensure!(back.source_dtype() == t.source_dtype(), "case {case}: {name} dtype changed");
            ensure!(bits(back) == bits(t), "case {case}: {name} differs from what was written");
        }
    }

    let samples: Vec<f32> = (0..100_000)
        .map(|i| match i % 4 {
            0 => f32::from_bits(r.random()),
            // exact halfway points between neighbouring BF16 values
            1 => f32::from_bits((r.random::<u32>() & 0xffff_0000) | 0x8000),
            2 => r.random_range(-4.0..4.0),
            _ => f32::from_bits(r.random::<u32>() & 0x807f_ffff),
        })
        .collect();
    let mut narrow = TensorMap::new();
    narrow.insert("x", Tensor::with_dtype(vec![samples.len()], samples.clone(), DType::BF16));
    let path = dir.path().join("narrow.safetensors");
    write_checkpoint(&narrow, &path, &policy).unwrap();
    let stored = load_checkpoint(&path).unwrap();
    for (i, (&x, &y)) in samples.iter().zip(stored.get("x").unwrap().data()).enumerate() {
        let want = reference_bf16(x);
        let ok = if want.is_nan() { y.is_nan() } else { want.to_bits() == y.to_bits() };
        ensure!(ok, "sample {i}: {x:e} ({:#010x}) stored as {y:e}, expected {want:e}", x.to_bits());
        ensure!(
            x.is_nan() || bf16_to_f32(f32_to_bf16(x)).to_bits() == want.to_bits(),
            "sample {i}: conversion helper disagrees"
        );
    }
    Ok("100 containers, 1e5 BF16 samples".into())
}

// ---------------------------------------------------------------- reflection

#[derive(Deserialize)]
struct Labeled {
    dataset: String,
    response: String,
    expected_substring: usize,
    expected_word_boundary: usize,
}

#[derive(Deserialize)]
struct Table5 {
    dataset_sizes: BTreeMap<String, u64>,
    datasets: Vec<String>,
    rows: Vec<Table5Row>,
}

#[derive(Deserialize)]
struct Table5Row {
    model: String,
    reflective_pct: Vec<f64>,
    avg: f64,
}

const REFLECTIVE: [&str; 6] = [
    "Wait, that is not right, so the sum is 12.",
    "Let me check the arithmetic once more. The sum is 12.",
    "The sum is 12. Let me just verify this by substitution.",
    "We re-examine the second case and recap: the sum is 12.",
    "I should double-check the sign. The sum is 12.",
    "Let me verify. Hmm, wait. The sum is 12.",
];
const PLAIN: [&str; 3] = [
    "The sum is 12.",
    "Adding the terms gives 12, so the answer is 12.",
    "Therefore the final answer is 12.",
];

fn reflection() -> Outcome {
    let path = fixture("reflection_50.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let labeled: Vec<Labeled> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure!(labeled.len() == 50, "fixture has {} records", labeled.len());
    let sub = ReflectionDetector::new(Matching::Substring);
    let word = ReflectionDetector::new(Matching::WordBoundary);
    let mut hand: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (i, l) in labeled.iter().enumerate() {
        let (s, w) = (sub.detect(&l.response), word.detect(&l.response));
        ensure!(s.keyword_count == l.expected_substring, "record {i} {:?}: {} substring hits", l.response, s.keyword_count);
        ensure!(w.keyword_count == l.expected_word_boundary, "record {i} {:?}: {} boundary hits", l.response, w.keyword_count);
        ensure!(s.is_reflective == (l.expected_substring > 0), "record {i}: reflective flag");
        let e = hand.entry(&l.dataset).or_default();
        e.0 += (l.expected_substring > 0) as u64;
        e.1 += l.expected_substring as u64;
    }
    let mut acc = CorpusAccumulator::new(Matching::Substring);
    read_responses(&path, &mut acc).unwrap();
    let report = acc.finish().unwrap();
    for (d, (reflective, hits)) in &hand {
        let s = &report.datasets[*d];
        ensure!(s.reflective_count == *reflective, "{d}: {} reflective, hand count {reflective}", s.reflective_count);
        let total: u64 = s.keyword_counts.values().sum();
        ensure!(total == *hits, "{d}: {total} keyword hits, hand count {hits}");
    }

    let mut notes = Vec::new();
    let t5: Table5 = serde_json::from_str(&fs::read_to_string(fixture("table5_7b.json")).unwrap()).unwrap();
    for row in &t5.rows {
        let mut acc = CorpusAccumulator::new(Matching::Substring);
        let mut labels = BTreeMap::new();
        for (d, &pct) in t5.datasets.iter().zip(&row.reflective_pct) {
            let n = t5.dataset_sizes[d];
            let positives = (pct / 100.0 * n as f64).round() as u64;
            labels.insert(d.clone(), positives);
            for i in 0..n {
                let response = if i < positives { REFLECTIVE[i as usize % 6] } else { PLAIN[i as usize % 3] };
                acc.add(&ResponseRecord {
                    id: i.into(),
                    dataset: d.clone(),
                    response: response.into(),
                    token_count: Some(100),
                    correct: None,
                    difficulty: None,
                })
                .unwrap();
            }
        }
        let report = acc.finish().unwrap();
        for (d, &pct) in t5.datasets.iter().zip(&row.reflective_pct) {
            let s = &report.datasets[d];
            ensure!(s.reflective_count == labels[d], "{} {d}: {} vs {} labeled", row.model, s.reflective_count, labels[d]);
            let got = 100.0 * s.reflective_ratio;
            if (got - pct).abs() > 0.05 {
                let n = t5.dataset_sizes[d];
                let reachable = (0..=n).any(|c| (100.0 * c as f64 / n as f64 - pct).abs() <= 0.05);
                ensure!(!reachable, "{} {d}: ratio {got:.3} vs printed {pct}", row.model);
                notes.push(format!("{} {d}: printed {pct}% is not k/{n} for any k", row.model));
            }
        }
        let avg = 100.0 * report.macro_avg.reflective_ratio;
        ensure!((avg - row.avg).abs() <= 0.05, "{}: average {avg:.3} vs printed {}", row.model, row.avg);
    }
    let mut detail = format!("50 hand-labeled responses, {} labeled corpora", t5.rows.len());
    if !notes.is_empty() {
        detail.push_str(&format!(" (note: {})", notes.join("; ")));
    }
    Ok(detail)
}

// ---------------------------------------------------------------- runner

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("results-table derived columns", Duration::from_secs(1), table1),
        ("task arithmetic and averaging identities", Duration::from_secs(5), ta_identities),
        ("TIES brute-force equivalence", Duration::from_secs(10), ties_oracle),
        ("DARE expectation and keep density", Duration::from_secs(60), dare),
        ("SVD truncation and thresholding", Duration::from_secs(10), svd_suite),
        ("LoRE objective monotonicity", Duration::from_secs(30), lore_monotone),
        ("AIM bounds and ordering", Duration::from_secs(5), aim_bounds),
        ("Sens coefficient contract", Duration::from_secs(5), sens_contract),
        ("determinism across thread counts", Duration::from_secs(60), determinism),
        ("container roundtrip and BF16 rounding", Duration::from_secs(10), io_roundtrip),
        ("reflection detection", Duration::from_secs(5), reflection),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({took:.2?}): {why}");
            }
        }
    }
    println!("\n{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
