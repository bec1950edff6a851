// Container layout:
//
//   [u64 LE header length N][N bytes JSON header][payload]
//
// The header maps each tensor name to {"dtype", "shape", "data_offsets"},
// with offsets relative to the start of the payload, plus an optional
// "__metadata__" object of string pairs. Files written here are canonical:
// tensors laid out in lexicographic name order, the header serialized with
// sorted keys and space-padded so the payload starts 8-byte aligned.
//
// Sharded checkpoints are a directory holding an index JSON
// {"weight_map": {name: shard_file}} next to the shard files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::dtype::{decode, encode_into};
use super::{DType, DtypePolicy, Tensor, TensorMap, TensorMeta};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "model.safetensors.index.json";
const SINGLE_FILE: &str = "model.safetensors";
const METADATA_KEY: &str = "__metadata__";

/// Parse the header of an in-memory container. Returns tensor entries in
/// lexicographic order, the free-form metadata and the payload start offset.
pub fn read_header(
    bytes: &[u8],
    path: &Path,
) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "file shorter than the 8-byte header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = 8u64
        .checked_add(n)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format(path, format!("header length {n} exceeds file size")))?
        as usize;
    let (metas, metadata) = parse_header(&bytes[8..header_end], bytes.len() - header_end, path)?;
    Ok((metas, metadata, header_end))
}

fn parse_header(
    raw: &[u8],
    payload_len: usize,
    path: &Path,
) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>)> {
    let header: Map<String, Value> = serde_json::from_slice(raw)
        .map_err(|e| Error::format(path, format!("header is not a JSON object: {e}")))?;

    let mut metas = Vec::with_capacity(header.len());
    let mut metadata = BTreeMap::new();
    for (name, entry) in header {
        if name == METADATA_KEY {
            let obj = entry
                .as_object()
                .ok_or_else(|| Error::format(path, "__metadata__ must be an object"))?;
            for (k, v) in obj {
                let v = v.as_str().ok_or_else(|| {
                    Error::format(path, format!("__metadata__.{k} must be a string"))
                })?;
                metadata.insert(k.clone(), v.to_string());
            }
            continue;
        }
        metas.push(parse_entry(&name, &entry, payload_len, path)?);
    }

    let mut by_start: Vec<&TensorMeta> = metas.iter().filter(|m| m.numel() > 0).collect();
    by_start.sort_by_key(|m| m.byte_range);
    for pair in by_start.windows(2) {
        if pair[1].byte_range.0 < pair[0].byte_range.1 {
            return Err(Error::format(
                path,
                format!(
                    "byte ranges of `{}` and `{}` overlap",
                    pair[0].name, pair[1].name
                ),
            ));
        }
    }
    metas.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((metas, metadata))
}

fn read_file_header(path: &Path) -> Result<Vec<TensorMeta>> {
    let io = |e| Error::io(path, e);
    let mut file = File::open(path).map_err(io)?;
    let file_len = file.metadata().map_err(io)?.len();
    let mut len = [0u8; 8];
    file.read_exact(&mut len)
        .map_err(|_| Error::format(path, "file shorter than the 8-byte header length"))?;
    let n = u64::from_le_bytes(len);
    if n > file_len - 8 {
        return Err(Error::format(path, format!("header length {n} exceeds file size")));
    }
    let mut raw = vec![0u8; n as usize];
    file.read_exact(&mut raw).map_err(io)?;
    Ok(parse_header(&raw, (file_len - 8 - n) as usize, path)?.0)
}

fn parse_entry(name: &str, entry: &Value, payload_len: usize, path: &Path) -> Result<TensorMeta> {
    let bad = |what: &str| Error::format(path, format!("tensor `{name}`: {what}"));
    let obj = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = match dtype_str {
        "BF16" => DType::BF16,
        "F32" => DType::F32,
        other => {
            return Err(Error::UnsupportedDtype {
                tensor: name.to_string(),
                dtype: other.to_string(),
            })
        }
    };
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| bad("data_offsets must be [start, end]"))?;
    let expected = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    if offsets.1 < offsets.0 || offsets.1 - offsets.0 != expected {
        return Err(bad(&format!(
            "data_offsets {offsets:?} do not match {expected} bytes for shape {shape:?}"
        )));
    }
    if offsets.1 > payload_len {
        return Err(bad("data_offsets run past the end of the file"));
    }
    Ok(TensorMeta {
        name: name.to_string(),
        dtype,
        shape,
        byte_range: offsets,
    })
}

fn load_container(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (metas, metadata, start) = read_header(&bytes, path)?;
    let payload = &bytes[start..];
    let tensors: Vec<(String, Tensor)> = metas
        .par_iter()
        .map(|m| {
            let raw = &payload[m.byte_range.0..m.byte_range.1];
            let t = Tensor::with_dtype(m.shape.clone(), decode(m.dtype, raw), m.dtype);
            (m.name.clone(), t)
        })
        .collect();
    let mut map: TensorMap = tensors.into_iter().collect();
    *map.metadata_mut() = metadata;
    Ok(map)
}

fn load_sharded(index_path: &Path) -> Result<TensorMap> {
    let dir = index_path.parent().unwrap_or_else(|| Path::new("."));
    let raw = fs::read(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: Value = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(index_path, format!("index is not JSON: {e}")))?;
    let weight_map = index
        .get("weight_map")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::format(index_path, "index has no weight_map object"))?;

    let mut by_shard: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (name, shard) in weight_map {
        let shard = shard.as_str().ok_or_else(|| {
            Error::format(index_path, format!("weight_map.{name} must be a file name"))
        })?;
        by_shard.entry(shard.to_string()).or_default().push(name.clone());
    }
    for shard in by_shard.keys() {
        if !dir.join(shard).is_file() {
            return Err(Error::format(
                index_path,
                format!("shard `{shard}` is listed in the index but missing"),
            ));
        }
    }

    let parts: Vec<TensorMap> = by_shard
        .par_iter()
        .map(|(shard, names)| {
            let shard_path = dir.join(shard);
            let mut loaded = load_container(&shard_path)?;
            let mut part = TensorMap::new();
            for name in names {
                let t = loaded.remove(name).ok_or_else(|| Error::MissingTensor {
                    tensor: name.clone(),
                    side: shard_path.display().to_string(),
                })?;
                part.insert(name.clone(), t);
            }
            *part.metadata_mut() = loaded.metadata().clone();
            Ok(part)
        })
        .collect::<Result<_>>()?;

    let mut out = TensorMap::new();
    for part in parts {
        for (k, v) in part.metadata() {
            out.metadata_mut().entry(k.clone()).or_insert_with(|| v.clone());
        }
        for (name, t) in part {
            out.insert(name, t);
        }
    }
    Ok(out)
}

fn find_in_dir(dir: &Path) -> Result<PathBuf> {
    let index = dir.join(INDEX_FILE);
    if index.is_file() {
        return Ok(index);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indexes = Vec::new();
    let mut singles = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".safetensors.index.json") {
            indexes.push(path);
        } else if name.ends_with(".safetensors") {
            singles.push(path);
        }
    }
    match (indexes.len(), singles.len()) {
        (1, _) => Ok(indexes.pop().unwrap()),
        (0, 1) => Ok(singles.pop().unwrap()),
        (0, 0) => Err(Error::format(dir, "no checkpoint file in directory")),
        _ => Err(Error::format(
            dir,
            "several checkpoint files and no unambiguous index",
        )),
    }
}

fn resolve(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        find_in_dir(path)
    } else {
        Ok(path.to_path_buf())
    }
}

fn is_index(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".index.json"))
}

/// Load a single container file, a shard index, or a directory holding either.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = resolve(path.as_ref())?;
    if is_index(&path) {
        load_sharded(&path)
    } else {
        load_container(&path)
    }
}

/// Tensor entries of a checkpoint (file, index or directory), read from the
/// headers alone without touching the payload.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TensorMeta>> {
    let path = resolve(path.as_ref())?;
    if !is_index(&path) {
        return read_file_header(&path);
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: Value = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(&path, format!("index is not JSON: {e}")))?;
    let weight_map = index
        .get("weight_map")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::format(&path, "index has no weight_map object"))?;
    let mut shards: Vec<&str> = weight_map.values().filter_map(Value::as_str).collect();
    shards.sort_unstable();
    shards.dedup();
    let mut metas = Vec::new();
    for shard in shards {
        let wanted: Vec<TensorMeta> = read_file_header(&dir.join(shard))?
            .into_iter()
            .filter(|m| weight_map.get(&m.name).and_then(Value::as_str) == Some(shard))
            .collect();
        metas.extend(wanted);
    }
    metas.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(metas)
}

fn check_names(tensors: &TensorMap) -> Result<()> {
    if tensors.contains(METADATA_KEY) {
        return Err(Error::validation(
            METADATA_KEY,
            "tensor name collides with the reserved metadata key",
        ));
    }
    Ok(())
}

fn build_header(
    entries: &[(&String, &Tensor, DType)],
    metadata: &BTreeMap<String, String>,
) -> (Vec<u8>, u64) {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    let mut offset = 0u64;
    for (name, t, dtype) in entries {
        let len = (t.numel() * dtype.size()) as u64;
        header.insert(
            (*name).clone(),
            json!({
                "dtype": dtype.as_str(),
                "shape": t.shape(),
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while bytes.len() % 8 != 0 {
        bytes.push(b' ');
    }
    (bytes, offset)
}

fn write_container(
    path: &Path,
    entries: &[(&String, &Tensor, DType)],
    metadata: &BTreeMap<String, String>,
) -> Result<u64> {
    let (header, payload_len) = build_header(entries, metadata);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io = |e| Error::io(path, e);
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let mut buf = Vec::new();
    for (_, t, dtype) in entries {
        for chunk in t.data().chunks(1 << 18) {
            buf.clear();
            encode_into(*dtype, chunk, &mut buf);
            w.write_all(&buf).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(payload_len)
}

/// Write `tensors` as one container file, converting each tensor to the
/// dtype chosen by `policy`. FP32→BF16 narrowing rounds to nearest even.
pub fn write_checkpoint(
    tensors: &TensorMap,
    path: impl AsRef<Path>,
    policy: &DtypePolicy,
) -> Result<()> {
    check_names(tensors)?;
    let entries: Vec<_> = tensors
        .iter()
        .map(|(n, t)| (n, t, policy.resolve(n, t.source_dtype())))
        .collect();
    write_container(path.as_ref(), &entries, tensors.metadata())?;
    Ok(())
}

/// Write `tensors` into `dir`, splitting into shards of at most
/// `max_shard_bytes` payload each (a single oversized tensor gets its own
/// shard). One shard is written as `model.safetensors` without an index.
/// Returns the files written.
pub fn write_sharded(
    tensors: &TensorMap,
    dir: impl AsRef<Path>,
    policy: &DtypePolicy,
    max_shard_bytes: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    check_names(tensors)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut shards: Vec<Vec<(&String, &Tensor, DType)>> = vec![Vec::new()];
    let mut current = 0u64;
    for (name, t) in tensors.iter() {
        let dtype = policy.resolve(name, t.source_dtype());
        let len = (t.numel() * dtype.size()) as u64;
        let last = shards.last_mut().unwrap();
        if !last.is_empty() && current + len > max_shard_bytes {
            shards.push(Vec::new());
            current = 0;
        }
        shards.last_mut().unwrap().push((name, t, dtype));
        current += len;
    }

    if shards.len() == 1 {
        let path = dir.join(SINGLE_FILE);
        write_container(&path, &shards[0], tensors.metadata())?;
        return Ok(vec![path]);
    }

    let count = shards.len();
    let mut written = Vec::with_capacity(count + 1);
    let mut weight_map = BTreeMap::new();
    let mut total = 0u64;
    for (i, entries) in shards.iter().enumerate() {
        let file = format!("model-{:05}-of-{:05}.safetensors", i + 1, count);
        let path = dir.join(&file);
        total += write_container(&path, entries, tensors.metadata())?;
        for (name, _, _) in entries {
            weight_map.insert((*name).clone(), file.clone());
        }
        written.push(path);
    }
    let index = json!({
        "metadata": { "total_size": total },
        "weight_map": weight_map,
    });
    let index_path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    written.push(index_path);
    Ok(written)
}
