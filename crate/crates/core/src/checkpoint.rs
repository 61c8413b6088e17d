//! Checkpoint files.
//!
//! Layout: the 7-byte magic `SCHVPP1`, a little-endian `u64` byte length, a
//! UTF-8 manifest of that length, then every array's payload as
//! little-endian `f32` in manifest order. The manifest holds `key=value`
//! lines for the model configuration and metadata, followed by one
//! `array <name> dtype=f32 dims=<d0>,<d1>,...` line per array.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::config::{parse, ModelConfig};
use crate::error::{Error, Result};
use crate::network::{param_specs, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SCHVPP1";

fn manifest(params: &ParameterStore) -> String {
    let mut m = String::new();
    for (k, v) in params.config.to_pairs() {
        m.push_str(&format!("{k}={v}\n"));
    }
    m.push_str(&format!("step={}\nseed={}\n", params.step, params.seed));
    for (name, t) in &params.arrays {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        m.push_str(&format!("array {name} dtype=f32 dims={}\n", dims.join(",")));
    }
    m
}

/// Serialize to bytes.
pub fn to_bytes(params: &ParameterStore) -> Vec<u8> {
    let m = manifest(params);
    let mut out = Vec::with_capacity(15 + m.len() + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(m.as_bytes());
    for t in params.arrays.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write beside the target and rename so readers never see a partial file.
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct ArrayEntry {
    name: String,
    dims: Vec<usize>,
}

fn parse_array_line(line: &str, lineno: usize) -> Result<ArrayEntry> {
    let bad = || Error::format(format!("manifest line {lineno}: malformed array entry `{line}`"));
    let mut parts = line.split(' ');
    let (Some("array"), Some(name), Some(dtype), Some(dims), None) = (
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
    ) else {
        return Err(bad());
    };
    if dtype != "dtype=f32" {
        return Err(Error::format(format!(
            "array `{name}`: unsupported `{dtype}`"
        )));
    }
    let dims = dims
        .strip_prefix("dims=")
        .ok_or_else(bad)?
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ArrayEntry {
        name: name.to_string(),
        dims,
    })
}

/// Parse bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("missing SCHVPP1 magic"));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::format("truncated manifest length"))?;
    let mlen = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::format("manifest length overflows"))?;
    let rest = &rest[8..];
    let text = rest
        .get(..mlen)
        .ok_or_else(|| Error::format("truncated manifest"))?;
    let text = std::str::from_utf8(text).map_err(|_| Error::format("manifest is not UTF-8"))?;
    let mut payload = &rest[mlen..];

    let mut config = ModelConfig::default();
    let mut seen = IndexMap::new();
    let mut step = None;
    let mut seed = None;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with("array ") {
            entries.push(parse_array_line(line, lineno)?);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("manifest line {lineno}: expected key=value")))?;
        if seen.insert(k.to_string(), ()).is_some() {
            return Err(Error::format(format!("duplicate field `{k}`")));
        }
        let wrap = |e: Error| Error::format(format!("field `{k}`: {e}"));
        match k {
            "step" => step = Some(parse::<u64>(k, v).map_err(wrap)?),
            "seed" => seed = Some(parse::<u64>(k, v).map_err(wrap)?),
            _ => {
                if !config.set(k, v).map_err(wrap)? {
                    return Err(Error::format(format!("unknown field `{k}`")));
                }
            }
        }
    }
    for k in ModelConfig::KEYS {
        if !seen.contains_key(*k) {
            return Err(Error::format(format!("missing field `{k}`")));
        }
    }
    let step = step.ok_or_else(|| Error::format("missing field `step`"))?;
    let seed = seed.ok_or_else(|| Error::format("missing field `seed`"))?;
    config
        .validate()
        .map_err(|e| Error::format(format!("stored configuration invalid: {e}")))?;

    let mut arrays = IndexMap::new();
    for e in entries {
        let n: usize = e.dims.iter().product();
        let nbytes = n * 4;
        let chunk = payload
            .get(..nbytes)
            .ok_or_else(|| Error::format(format!("truncated payload for array `{}`", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        payload = &payload[nbytes..];
        if arrays
            .insert(e.name.clone(), Tensor::from_vec(&e.dims, data)?)
            .is_some()
        {
            return Err(Error::format(format!("duplicate array `{}`", e.name)));
        }
    }
    if !payload.is_empty() {
        return Err(Error::format(format!(
            "{} trailing bytes after last array",
            payload.len()
        )));
    }
    let store = ParameterStore {
        config,
        step,
        seed,
        arrays,
    };
    store.validate()?;
    Ok(store)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    from_bytes(&fs::read(path)?)
}

/// Load and require that the stored arrays match the table implied by
/// `expected`. The first array whose name or shape differs is reported.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ParameterStore> {
    let store = load_checkpoint(path)?;
    check_against(&store, expected)?;
    Ok(store)
}

pub fn check_against(store: &ParameterStore, expected: &ModelConfig) -> Result<()> {
    let specs = param_specs(expected);
    for (spec, (name, t)) in specs.iter().zip(&store.arrays) {
        if &spec.name != name {
            return Err(Error::format(format!(
                "array mismatch: checkpoint has `{}` where `{}` is expected",
                name, spec.name
            )));
        }
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::format(format!(
                "shape mismatch for `{}`: checkpoint {:?}, expected {:?}",
                name,
                t.shape(),
                spec.shape
            )));
        }
    }
    if specs.len() != store.arrays.len() {
        return Err(Error::format(format!(
            "array count mismatch: checkpoint {}, expected {}",
            store.arrays.len(),
            specs.len()
        )));
    }
    for ((k, want), (_, got)) in expected.to_pairs().iter().zip(store.config.to_pairs()) {
        if *want != got {
            return Err(Error::format(format!(
                "config field `{k}` mismatch: checkpoint {got}, expected {want}"
            )));
        }
    }
    Ok(())
}
